"""Adam, cosine learning-rate decay, pre-training and LoRA fine-tuning loops.

Run configs are flat ``key = value`` files (see :class:`TrainConfig` for the
keys); metrics go to ``metrics.csv`` with header ``step,lr,ce,mse,total``;
checkpoints are MMT1 directories that also carry the optimizer state, so a
resumed run continues bitwise where the original left off.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernel as K
from . import mllm
from .kernel import Tensor
from .lora import LoraAdapter, merge_lora
from .mllm import INPUT_ADAPTER, OUTPUT_HEAD, POSITION, ModelConfig, MultimodalLM
from .seqpack import collate, dir_resolver, load_corpus, pack, read_manifest, validate
from .vitsim import VisualTokenizer, VisualTokenizerConfig

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "lr", "ce", "mse", "total")


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, Tensor], lr: float | None = None):
    """One bias-corrected Adam update of every tensor in ``params`` (in place)."""
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"adam_step: parameter {name!r} has no gradient")
    state.step += 1
    lr = state.lr if lr is None else lr
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def cosine_lr(step: int, total: int, peak: float, floor: float = 0.0) -> float:
    if total <= 1:
        return peak
    return floor + 0.5 * (peak - floor) * (1.0 + math.cos(math.pi * step / total))


# ---------------------------------------------------------------------------
# LoRA


def lora_wrap(model: MultimodalLM, name: str, rank: int = 4, alpha: float = 8.0, rng=None) -> LoraAdapter:
    """Attach an adapter to linear ``name``; its base weight and bias are frozen."""
    w = model.params[name + ".w"]
    rng = rng if rng is not None else np.random.default_rng(0)
    ad = LoraAdapter.init(w.shape[0], w.shape[1], rank, alpha, rng)
    model.lora[name] = ad
    w.requires_grad = False
    if name + ".b" in model.params:
        model.params[name + ".b"].requires_grad = False
    return ad


def apply_lora(model: MultimodalLM, rank: int = 4, alpha: float = 8.0, seed: int = 0, names=None) -> list[str]:
    rng = np.random.default_rng(seed)
    names = model.adaptable_linears() if names is None else list(names)
    for n in names:
        lora_wrap(model, n, rank, alpha, rng)
    return names


def merge_all(model: MultimodalLM) -> MultimodalLM:
    """A plain copy of ``model`` with every adapter folded into its base weight."""
    params = {n: K.Tensor(t.data.copy()) for n, t in model.params.items()}
    for name, ad in model.lora.items():
        params[name + ".w"].data = merge_lora(model.params[name + ".w"], ad)
    return MultimodalLM(model.cfg, params)


# ---------------------------------------------------------------------------
# config files


@dataclass
class TrainConfig:
    corpus: str = ""  # manifest.jsonl path
    out_dir: str = "runs/pretrain"
    steps: int = 600
    lr: float = 6e-3
    lr_floor: float = 1e-3
    lam: float = 1.0
    batch_size: int = 0  # 0 = whole corpus every step
    eos: int = 1  # terminate every document with a trainable EOS
    seed: int = 0
    checkpoint_every: int = 0  # 0 = only the final checkpoint
    # model
    model_dim: int = 48
    n_layers: int = 2
    n_heads: int = 4
    max_len: int = 256
    # visual tokenizer
    tile: int = 16
    patch_size: int = 2
    visual_dim: int = 16
    vit_seed: int = 0
    # fine-tuning
    base_checkpoint: str = ""
    lora_rank: int = 4
    lora_alpha: float = 8.0
    trainable: str = "lora,input_adapter,output_head,position"

    def model_config(self) -> ModelConfig:
        return ModelConfig(model_dim=self.model_dim, n_layers=self.n_layers, n_heads=self.n_heads,
                           visual_dim=self.visual_dim, max_len=self.max_len, seed=self.seed)

    def vit_config(self) -> VisualTokenizerConfig:
        return VisualTokenizerConfig(tile=self.tile, patch_size=self.patch_size,
                                     embed_dim=self.visual_dim, seed=self.vit_seed)


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    cfg = dataclasses.replace(base) if base else TrainConfig()
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        conv = {"int": int, "float": float, "str": str}[types[key]]
        setattr(cfg, key, conv(val))
    return cfg


def load_config(path, env: dict | None = None) -> TrainConfig:
    """Read a run config; relative paths resolve against the file's directory. MMSEQ_SEED overrides ``seed``."""
    path = Path(path)
    cfg = parse_config(path.read_text())
    for key in ("corpus", "base_checkpoint"):
        v = getattr(cfg, key)
        if v and not Path(v).is_absolute():
            setattr(cfg, key, str((path.parent / v).resolve()))
    return apply_env(cfg, env)


def apply_env(cfg: TrainConfig, env: dict | None = None) -> TrainConfig:
    env = os.environ if env is None else env
    if env.get("MMSEQ_SEED"):
        cfg.seed = int(env["MMSEQ_SEED"])
    return cfg


def dump_config(cfg: TrainConfig) -> str:
    return "".join(f"{f.name} = {getattr(cfg, f.name)}\n" for f in dataclasses.fields(cfg))


# ---------------------------------------------------------------------------
# data


class CorpusError(ValueError):
    pass


PACK_META = "pack_meta.json"


def load_packed(manifest, vit: VisualTokenizer, eos: bool = True):
    """Packed sequences from a JSONL manifest, or from a directory written by ``pack``."""
    path = Path(manifest)
    if path.is_dir():
        if not (path / "sequences.jsonl").is_file():
            raise CorpusError(f"{path}: not a packed corpus (no sequences.jsonl)")
        meta_file = path / PACK_META
        if meta_file.is_file():
            meta = json.loads(meta_file.read_text())
            if meta.get("vit_checksum") not in (None, vit.checksum()):
                raise CorpusError(f"{path}: packed with a different visual tokenizer")
            if meta.get("eos") not in (None, bool(eos)):
                raise CorpusError(f"{path}: packed with eos={meta['eos']}, config wants eos={bool(eos)}")
        seqs = load_corpus(path)
        if not seqs:
            raise CorpusError(f"{path}: no documents")
    else:
        docs = read_manifest(path)
        if not docs:
            raise CorpusError(f"{manifest}: no documents")
        resolve = dir_resolver(path.parent)
        seqs = [pack(d, vit, resolve, eos=eos) for d in docs]
    problems = [f"{s.doc_id}: {p}" for s in seqs for p in validate(s, vit.embed_dim)]
    if problems:
        raise CorpusError("corpus invariant violations:\n" + "\n".join(problems))
    return seqs


def batch_indices(step: int, n: int, batch_size: int, seed: int) -> np.ndarray:
    """Deterministic per-epoch shuffles; depends only on (step, seed) so resuming needs no RNG state."""
    if batch_size <= 0 or batch_size >= n:
        return np.arange(n)
    per_epoch = n // batch_size
    epoch, k = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return np.sort(perm[k * batch_size:(k + 1) * batch_size])


def length_buckets(lengths, ratio: float = 1.5) -> list[list[int]]:
    """Group positions of ``lengths`` into runs of similar length to cut padding."""
    order = sorted(range(len(lengths)), key=lambda i: (lengths[i], i))
    buckets: list[list[int]] = []
    for i in order:
        if buckets and lengths[i] <= ratio * lengths[buckets[-1][0]]:
            buckets[-1].append(i)
        else:
            buckets.append([i])
    return buckets


def sequence_counts(seqs) -> tuple[int, int]:
    """(sequences with LM targets, sequences with query segments)."""
    n_lm = sum(any(t is not None for t in s.lm_targets) for s in seqs)
    n_q = sum(bool(s.query_segment_indices()) for s in seqs)
    return n_lm, n_q


def accumulate_loss(model: MultimodalLM, seqs, lam: float = 1.0):
    """Backpropagate the loss of ``seqs`` bucket by bucket; returns (total, ce, mse) floats.

    The gradients equal those of one padded batch up to rounding.
    """
    norm = sequence_counts(seqs)
    sums = np.zeros(3)
    for bucket in length_buckets([s.total_len for s in seqs]):
        batch = collate([seqs[i] for i in bucket], d_v=model.cfg.visual_dim)
        total, ce, mse = mllm.loss(model, batch, lam, norm)
        K.backward(total)
        sums += [total.item(), ce.item(), mse.item()]
    return tuple(float(x) for x in sums)


# ---------------------------------------------------------------------------
# checkpoints with optimizer state


def checksum(tensors) -> str:
    h = hashlib.sha256()
    for name, t in sorted(tensors.items() if isinstance(tensors, dict) else tensors):
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.data if isinstance(t, Tensor) else t).tobytes())
    return h.hexdigest()


def save_training_checkpoint(path, model: MultimodalLM, opt: AdamState, step: int, names=None) -> Path:
    out = model.save(path, only=names)
    (out / "optim").mkdir(exist_ok=True)
    for n in opt.m:
        K.save(out / "optim" / f"{n}.m.mmt", opt.m[n])
        K.save(out / "optim" / f"{n}.v.mmt", opt.v[n])
    state = {"step": step, "adam_step": opt.step, "lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2,
             "eps": opt.eps, "names": sorted(opt.m)}
    (out / "optim" / "state.json").write_text(json.dumps(state, indent=1))
    return out


def load_optimizer(path) -> tuple[AdamState, int]:
    base = Path(path) / "optim"
    st = json.loads((base / "state.json").read_text())
    opt = AdamState(st["lr"], st["beta1"], st["beta2"], st["eps"], st["adam_step"])
    for n in st["names"]:
        opt.m[n] = K.load(base / f"{n}.m.mmt")
        opt.v[n] = K.load(base / f"{n}.v.mmt")
    return opt, st["step"]


# ---------------------------------------------------------------------------
# loops


@dataclass
class RunResult:
    metrics: list
    checkpoint: Path | None
    model: MultimodalLM
    final: dict


def evaluate(model: MultimodalLM, seqs, lam: float = 1.0) -> dict:
    batch = collate(seqs, d_v=model.cfg.visual_dim)
    logits, regressed = model.forward(batch)
    total, ce, mse = mllm.loss(model, batch, lam)
    cos = mllm.query_cosines(regressed, batch)
    return {"ce": ce.item(), "mse": mse.item(), "total": total.item(),
            "token_accuracy": mllm.token_accuracy(logits, batch),
            "min_cosine": float(cos.min()) if cos.size else 1.0,
            "mean_cosine": float(cos.mean()) if cos.size else 1.0}


def _write_metrics(path: Path, rows, append: bool):
    new = not (append and path.exists())
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(METRIC_FIELDS)
        for r in rows:
            w.writerow([r["step"]] + [repr(r[k]) for k in METRIC_FIELDS[1:]])


def train_loop(model: MultimodalLM, seqs, cfg: TrainConfig, trainable: dict[str, Tensor],
               opt: AdamState, start: int, out_dir: Path | None, save_names=None, stop: int | None = None):
    stop = cfg.steps if stop is None else stop
    metrics = []
    for step in range(start, stop):
        lr = cosine_lr(step, cfg.steps, cfg.lr, cfg.lr_floor)
        idx = batch_indices(step, len(seqs), cfg.batch_size, cfg.seed)
        K.zero_grads(model.parameters())
        total, ce, mse = accumulate_loss(model, [seqs[i] for i in idx], cfg.lam)
        for t in trainable.values():
            if t.grad is None:  # not reached by this batch (e.g. no query segment)
                t.grad = np.zeros_like(t.data)
        adam_step(opt, trainable, lr)
        metrics.append({"step": step, "lr": lr, "ce": ce, "mse": mse, "total": total})
        if step % 25 == 0:
            log.info("step %d lr %.2e ce %.4f mse %.5f", step, lr, ce, mse)
        if out_dir is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0 and step + 1 < stop:
            save_training_checkpoint(out_dir / f"step{step + 1:06d}", model, opt, step + 1, save_names)
    K.zero_grads(model.parameters())
    return metrics


def pretrain(cfg: TrainConfig, resume_from=None, stop: int | None = None, write: bool = True) -> RunResult:
    """Train every model parameter on ``cfg.corpus``; ``stop`` ends early without changing the schedule."""
    vit = VisualTokenizer(cfg.vit_config())
    seqs = load_packed(cfg.corpus, vit, eos=bool(cfg.eos))
    out = Path(cfg.out_dir) if write else None
    if resume_from is not None:
        model = MultimodalLM.load(resume_from)
        opt, start = load_optimizer(resume_from)
    else:
        model = MultimodalLM(cfg.model_config())
        opt, start = AdamState(lr=cfg.lr), 0
    trainable = dict(model.named_parameters())
    for t in trainable.values():
        t.requires_grad = True
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(dump_config(cfg))
        vit.save(out / "vit_projection.mmt")
    metrics = train_loop(model, seqs, cfg, trainable, opt, start, out, stop=stop)
    ckpt = None
    if out is not None:
        _write_metrics(out / "metrics.csv", metrics, append=resume_from is not None)
        end = start + len(metrics)
        ckpt = save_training_checkpoint(out / f"step{end:06d}", model, opt, end)
        save_training_checkpoint(out / "final", model, opt, end)
    return RunResult(metrics, ckpt, model, evaluate(model, seqs, cfg.lam))


GROUPS = {
    "input_adapter": lambda n: n.startswith(INPUT_ADAPTER),
    "output_head": lambda n: n.startswith(OUTPUT_HEAD),
    "position": lambda n: n.startswith(POSITION),
    "lora": lambda n: n.endswith(".lora_A") or n.endswith(".lora_B"),
}


def trainable_names(model: MultimodalLM, groups: str) -> list[str]:
    wanted = [g.strip() for g in groups.split(",") if g.strip()]
    unknown = [g for g in wanted if g not in GROUPS]
    if unknown:
        raise ValueError(f"unknown parameter group(s) {unknown}; known: {sorted(GROUPS)}")
    names = [n for n, _ in model.named_parameters() if any(GROUPS[g](n) for g in wanted)]
    for g in wanted:
        if not any(GROUPS[g](n) for n in names):
            raise ValueError(f"parameter group {g!r} matches no parameter in this model")
    return names


def prepare_finetune(cfg: TrainConfig, base_checkpoint=None) -> tuple[MultimodalLM, list[str]]:
    base = base_checkpoint or cfg.base_checkpoint
    if not base or not (Path(base) / "manifest.json").is_file():
        raise FileNotFoundError(f"base checkpoint not found: {base!r}")
    model = MultimodalLM.load(base)
    if model.lora:
        raise ValueError("base checkpoint already carries adapters; merge them first")
    apply_lora(model, cfg.lora_rank, cfg.lora_alpha, seed=cfg.seed)
    names = trainable_names(model, cfg.trainable)
    model.set_trainable(names)
    return model, names


def finetune(cfg: TrainConfig, base_checkpoint=None, write: bool = True) -> RunResult:
    """Freeze the base, train adapters plus the configured groups, save only those tensors."""
    model, names = prepare_finetune(cfg, base_checkpoint)
    vit = VisualTokenizer(cfg.vit_config())
    seqs = load_packed(cfg.corpus, vit, eos=bool(cfg.eos))
    trainable = {n: t for n, t in model.named_parameters() if n in set(names)}
    frozen = {n: t for n, t in model.named_parameters() if n not in trainable}
    before = checksum(frozen)
    out = Path(cfg.out_dir) if write else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(dump_config(cfg))
    opt = AdamState(lr=cfg.lr)
    metrics = train_loop(model, seqs, cfg, trainable, opt, 0, out, save_names=names)
    if checksum(frozen) != before:
        raise RuntimeError("frozen base weights changed during fine-tuning")
    ckpt = None
    if out is not None:
        _write_metrics(out / "metrics.csv", metrics, append=False)
        ckpt = model.save(out / "adapter", only=set(names))
    final = evaluate(model, seqs, cfg.lam)
    final["base_checksum"] = before
    return RunResult(metrics, ckpt, model, final)


def load_finetuned(base_checkpoint, adapter_dir) -> MultimodalLM:
    """Base checkpoint with the adapter directory's tensors applied on top."""
    model = MultimodalLM.load(base_checkpoint)
    _, tensors, meta = mllm.load_checkpoint(adapter_dir)
    for name, info in meta.get("lora", {}).items():
        model.lora[name] = LoraAdapter(K.parameter(tensors[name + ".lora_A"]),
                                       K.parameter(tensors[name + ".lora_B"]), info["alpha"])
    for name, arr in tensors.items():
        if name in model.params:
            model.params[name].data = arr
    return model
