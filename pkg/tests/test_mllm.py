import numpy as np
import pytest

from _util import causality_gap
from mmseq import codec
from mmseq import kernel as K
from mmseq.gradsuite import tiny_parts, tiny_setup
from mmseq.mllm import (
    ImageFeatures,
    ModelConfig,
    MultimodalLM,
    TokenEvent,
    batch_weights,
    generate,
    loss,
    prompt_from_tokens,
    query_cosines,
    token_accuracy,
)
from mmseq.seqpack import MultimodalDocument, TextItem, collate, pack
from mmseq.vitsim import VisualTokenizer

SMALL = ModelConfig(model_dim=16, n_layers=1, n_heads=2, visual_dim=4, max_len=320, seed=3)


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        MultimodalLM(ModelConfig(model_dim=10, n_heads=4))
    with pytest.raises(ValueError):
        MultimodalLM(ModelConfig(n_queries=32))


def test_forward_shapes():
    model, batch = tiny_setup(0)
    logits, reg = model.forward(batch)
    B, T = batch.shape
    assert logits.shape == (B, T, codec.VOCAB_SIZE)
    assert reg.shape == (1, 64, 4)


def test_causality_probes():
    model, batch = tiny_setup(1)
    rng = np.random.default_rng(0)
    T = batch.shape[1]
    for p in rng.integers(1, T, size=20):
        assert causality_gap(model, batch, int(p), rng) == 0.0


def test_max_len_enforced():
    model = MultimodalLM(ModelConfig(model_dim=8, n_heads=2, max_len=4))
    seq = prompt_from_tokens([65] * 5)
    with pytest.raises(ValueError, match="max_len"):
        model.forward(collate([seq]))


def test_batch_weights_sum_to_one():
    model, batch = tiny_setup(4)
    ce_w, mse_w = batch_weights(batch)
    assert abs(ce_w.sum() - 1.0) < 1e-12
    assert abs(mse_w.sum() - 1.0) < 1e-12
    assert not ce_w[~batch.lm_mask].any()


def test_padding_does_not_change_loss():
    model, seqs = tiny_parts(5)
    batch = collate(seqs, d_v=4)
    padded = collate(seqs, pad_to=batch.shape[1] + 7, d_v=4)
    a = loss(model, batch)[0].item()
    b = loss(model, padded)[0].item()
    assert abs(a - b) < 1e-12


def test_per_sequence_averaging():
    model, seqs = tiny_parts(6)
    batch = collate(seqs, d_v=4)
    singles = [loss(model, collate([s], d_v=4)) for s in seqs]
    total, ce, mse = loss(model, batch)
    assert abs(ce.item() - np.mean([s[1].item() for s in singles])) < 1e-12
    with_query = [s[2].item() for s, q in zip(singles, seqs) if q.query_segment_indices()]
    assert abs(mse.item() - np.mean(with_query)) < 1e-12


def test_loss_requires_regression_targets():
    model, batch = tiny_setup(7)
    batch.regression_targets = [None] * len(batch.regression_targets)
    with pytest.raises(ValueError, match="regression target"):
        loss(model, batch)


def test_initial_text_loss_near_uniform():
    model = MultimodalLM(ModelConfig(seed=0))
    seq = pack(MultimodalDocument([TextItem("the quick brown fox jumps")]), VisualTokenizer(), {})
    ce = loss(model, collate([seq]))[1].item()
    assert abs(ce - np.log(codec.VOCAB_SIZE)) < 0.05 * np.log(codec.VOCAB_SIZE)


def test_metrics():
    model, batch = tiny_setup(8)
    logits, reg = model.forward(batch)
    acc = token_accuracy(logits, batch)
    assert 0.0 <= acc <= 1.0
    cos = query_cosines(reg, batch)
    assert cos.shape == (64,) and np.all(np.abs(cos) <= 1 + 1e-12)
    assert query_cosines(None, batch).size == 0


def _biased_model(favour):
    """A model whose LM head always prefers token ``favour``."""
    model = MultimodalLM(SMALL)
    w = model.params["lm_head.w"].data
    w[:] = 0.0
    model.params["ln_f.g"].data[:] = 0.0
    model.params["ln_f.b"].data[:] = 1.0
    w[:, favour] = 1.0
    return model


def test_generate_stops_at_eos_and_max_new():
    assert generate(_biased_model(codec.EOS), prompt_from_tokens([65]), max_new=5) == []
    ev = generate(_biased_model(66), prompt_from_tokens([65]), max_new=4)
    assert ev == [TokenEvent(66)] * 4


def test_generate_emits_image_features_after_img_start():
    ev = generate(_biased_model(codec.IMG_START), prompt_from_tokens([65]), max_new=2)
    kinds = [type(e) for e in ev]
    assert kinds == [TokenEvent, ImageFeatures, TokenEvent, ImageFeatures]
    assert ev[1].features.shape == (64, 4) and np.all(np.isfinite(ev[1].features))


def test_generate_is_deterministic():
    model = MultimodalLM(SMALL)
    a = generate(model, prompt_from_tokens([72, 105]), max_new=6)
    b = generate(MultimodalLM(SMALL), prompt_from_tokens([72, 105]), max_new=6)
    assert [getattr(e, "id", None) for e in a] == [getattr(e, "id", None) for e in b]


def test_checkpoint_roundtrip(tmp_path):
    model, batch = tiny_setup(9)
    model.save(tmp_path / "ck")
    again = MultimodalLM.load(tmp_path / "ck")
    assert set(again.lora) == set(model.lora)
    a, ra = model.forward(batch)
    b, rb = again.forward(batch)
    assert np.array_equal(a.data, b.data) and np.array_equal(ra.data, rb.data)
    assert (tmp_path / "ck" / "vocab.txt").read_text() == codec.vocab_layout()


def test_checkpoint_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        MultimodalLM.load(tmp_path / "nope")
    model = MultimodalLM(SMALL)
    model.save(tmp_path / "ck")
    K.save(tmp_path / "ck" / "tensors" / "ln_f.g.mmt", np.ones(3))
    with pytest.raises(ValueError, match="ln_f.g"):
        MultimodalLM.load(tmp_path / "ck")
