"""Finite-difference verification of every differentiable op and of the full training loss."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import kernel as K
from . import mllm
from .codec import BBox
from .dynres import PositionEmbeddingParams, position_embeddings
from .image import Image
from .kernel import Tensor
from .lora import LoraAdapter, lora_forward
from .mllm import ModelConfig, MultimodalLM
from .seqpack import BoxedTextItem, ImageItem, MultimodalDocument, TextItem, collate, pack
from .vitsim import VisualTokenizer, VisualTokenizerConfig, avg_pool_1d

OP_TOLERANCE = 1e-5
END_TO_END_TOLERANCE = 1e-4


def _p(rng, *shape, lo=None):
    x = rng.normal(size=shape)
    if lo is not None:  # keep away from kinks
        x = np.where(np.abs(x) < lo, np.sign(x + 1e-300) * lo, x)
    return K.parameter(x)


def _reduce(y: Tensor, rng) -> Tensor:
    """Scalar with a generic upstream gradient."""
    w = rng.normal(size=y.shape) if y.shape else np.array(rng.normal())
    return K.tsum(y * Tensor(w)) if y.shape else y * Tensor(w)


# each case builds (outputs-producing closure, params) from a seeded generator
def _cases() -> dict[str, Callable]:
    def unary(fn, lo=None):
        def build(rng):
            x = _p(rng, 3, 4, lo=lo)
            return (lambda: fn(x)), [x]
        return build

    def binary(fn, sa=(3, 4), sb=(3, 4)):
        def build(rng):
            a, b = _p(rng, *sa), _p(rng, *sb)
            return (lambda: fn(a, b)), [a, b]
        return build

    def b_take(rng):
        t = _p(rng, 5, 3)
        idx = np.array([0, 2, 2, 4, 1, 0])
        return (lambda: K.take(t, idx)), [t]

    def b_getitem(rng):
        x = _p(rng, 4, 5)
        return (lambda: K.getitem(x, (slice(1, 3), [0, 2, 2]))), [x]

    def b_concat(rng):
        a, b = _p(rng, 2, 3), _p(rng, 4, 3)
        return (lambda: K.concat([a, b], axis=0)), [a, b]

    def b_stack(rng):
        a, b = _p(rng, 2, 3), _p(rng, 2, 3)
        return (lambda: K.stack([a, b], axis=1)), [a, b]

    def b_layer_norm(rng):
        x, g, b = _p(rng, 3, 6), _p(rng, 6), _p(rng, 6)
        return (lambda: K.layer_norm(x, g, b)), [x, g, b]

    def b_cross_entropy(rng):
        logits = _p(rng, 2, 4, 7)
        tgt = rng.integers(0, 7, size=(2, 4))
        mask = rng.random((2, 4)) < 0.7
        mask[0, 0] = True
        w = rng.random((2, 4))
        return (lambda: K.cross_entropy(logits, tgt, mask, weights=w)), [logits]

    def b_mse(rng):
        pred = _p(rng, 3, 4)
        tgt = rng.normal(size=(3, 4))
        return (lambda: K.mse(pred, tgt)), [pred]

    def b_lora(rng):
        W = K.parameter(rng.normal(size=(5, 4)))
        ad = LoraAdapter(_p(rng, 2, 5), _p(rng, 4, 2), 3.0)
        x = _p(rng, 3, 5)
        return (lambda: lora_forward(x, W, None, ad)), [x, ad.A, ad.B]

    def b_position(rng):
        prm = PositionEmbeddingParams(*(_p(rng, 6) for _ in range(4)))
        centers = rng.random((5, 2)) * 0.9 + 0.05
        return (lambda: position_embeddings(centers, prm)), prm.tensors()

    def b_pool(rng):
        x = _p(rng, 128, 3)
        return (lambda: avg_pool_1d(x)), [x]

    return {
        "add": binary(K.add), "add_broadcast": binary(K.add, sb=(4,)),
        "mul": binary(K.mul), "mul_broadcast": binary(K.mul, sb=(4,)),
        "neg": unary(K.neg), "scale": unary(lambda x: K.scale(x, -1.7)),
        "tanh": unary(K.tanh), "exp": unary(K.exp), "relu": unary(K.relu, lo=1e-3), "gelu": unary(K.gelu),
        "matmul": binary(K.matmul, (3, 4), (4, 2)),
        "matmul_batched": binary(K.matmul, (2, 3, 4), (2, 4, 5)),
        "matmul_shared": binary(K.matmul, (2, 3, 4), (4, 5)),
        "transpose": unary(lambda x: K.transpose(x)),
        "reshape": unary(lambda x: K.reshape(x, (2, 6))),
        "sum": unary(lambda x: K.tsum(x, axis=1)), "mean": unary(lambda x: K.mean(x, axis=0)),
        "getitem": b_getitem, "take": b_take, "concat": b_concat, "stack": b_stack,
        "softmax": unary(lambda x: K.softmax(x, axis=-1)),
        "log_softmax": unary(lambda x: K.log_softmax(x, axis=-1)),
        "layer_norm": b_layer_norm, "cross_entropy": b_cross_entropy, "mse": b_mse,
        "lora_forward": b_lora, "position_embeddings": b_position, "avg_pool": b_pool,
    }


OP_CASES = _cases()


def _corrupt(y: Tensor) -> Tensor:
    """Identity forward with a wrong backward; used only to prove the harness catches bad gradients."""
    return K._make(y.data.copy(), (y,), lambda g: (1.5 * g,), "corrupt")


def check_op(name: str, seed: int, h: float = 1e-6, fault: bool = False) -> float:
    rng = np.random.default_rng([seed, len(name)] + [ord(c) for c in name])
    fn, params = OP_CASES[name](rng)
    w_rng_state = rng.bit_generator.state

    def f():
        rng.bit_generator.state = w_rng_state
        y = fn()
        return _reduce(_corrupt(y) if fault else y, rng)

    return max(K.gradcheck(f, params, h))


# ---------------------------------------------------------------------------
# end to end


def tiny_parts(seed: int):
    """A small model with two LoRA-adapted layers and two sequences touching every feature."""
    vit = VisualTokenizer(VisualTokenizerConfig(tile=8, patch_size=1, embed_dim=4, seed=seed))
    cfg = ModelConfig(model_dim=8, n_layers=1, n_heads=2, visual_dim=4, max_len=320, init_std=0.3, seed=seed)
    model = MultimodalLM(cfg)
    rng = np.random.default_rng(seed)
    for name in ("blocks.0.attn.qkv", "blocks.0.mlp.fc"):
        w = model.params[name + ".w"]
        model.lora[name] = LoraAdapter(K.parameter(rng.normal(0, 0.3, (2, w.shape[0]))),
                                       K.parameter(rng.normal(0, 0.3, (w.shape[1], 2))), 4.0)
    img_in = Image(rng.random((8, 12, 3)))
    img_out = Image(rng.random((8, 8, 3)))
    docs = [
        MultimodalDocument([TextItem("ab "), ImageItem("in"), BoxedTextItem("x .", ((2, BBox(0.5, 0.5, 0.2, 0.3)),))], "d0"),
        MultimodalDocument([TextItem("cd"), ImageItem("out", "target"), TextItem("e")], "d1"),
    ]
    images = {"in": img_in, "out": img_out}
    return model, [pack(d, vit, images) for d in docs]


def tiny_setup(seed: int):
    model, seqs = tiny_parts(seed)
    return model, collate(seqs, d_v=model.cfg.visual_dim)


def check_end_to_end(seed: int, coords_per_tensor: int = 2, h: float = 1e-6, lam: float = 0.7) -> float:
    """Sampled-coordinate central differences for every parameter tensor of ``mllm.loss``."""
    model, batch = tiny_setup(seed)
    params = [t for _, t in model.named_parameters()]
    for t in params:
        t.requires_grad = True

    def f():
        return mllm.loss(model, batch, lam)[0]

    K.zero_grads(params)
    K.backward(f())
    rng = np.random.default_rng(seed + 12345)
    auto, num = [], []
    for t in params:
        flat = t.data.reshape(-1)
        g = t.grad.reshape(-1) if t.grad is not None else np.zeros_like(flat)
        for i in rng.choice(flat.size, size=min(coords_per_tensor, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + h
            fp = f().item()
            flat[i] = old - h
            fm = f().item()
            flat[i] = old
            auto.append(g[i])
            num.append((fp - fm) / (2 * h))
    K.zero_grads(params)
    return K.relative_error(np.array(auto), np.array(num))


def run_suite(seeds=range(20), fault: str | None = None, e2e_seeds=None) -> dict:
    """Worst relative error per op over ``seeds`` plus the end-to-end loss check."""
    if fault is not None and fault not in OP_CASES:
        raise KeyError(f"unknown op {fault!r}")
    seeds = list(seeds)
    worst = {name: max(check_op(name, s, fault=(name == fault)) for s in seeds) for name in OP_CASES}
    e2e = max(check_end_to_end(s) for s in (seeds if e2e_seeds is None else e2e_seeds))
    failing = [n for n, e in worst.items() if not e < OP_TOLERANCE]
    if not e2e < END_TO_END_TOLERANCE:
        failing.append("mllm.loss")
    return {"ops": worst, "end_to_end": {"mllm.loss": e2e}, "op_tolerance": OP_TOLERANCE,
            "end_to_end_tolerance": END_TO_END_TOLERANCE, "seeds": len(seeds),
            "worst_op": max(worst.values()), "failing": failing, "ok": not failing}
