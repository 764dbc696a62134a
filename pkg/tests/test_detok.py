import csv

import numpy as np
import pytest

from mmseq import detok as D
from mmseq.corpus import toy_images
from mmseq.image import Image
from mmseq.vitsim import VisualTokenizer


def lowpass_oracle(px, f=4):
    """Per block: colour means plus the shared luminance top/bottom split."""
    out = np.zeros_like(px)
    H, W, ch = px.shape
    for r in range(0, H, f):
        for c in range(0, W, f):
            blk = px[r:r + f, c:c + f]
            sign = np.where(np.arange(f) < f // 2, 1.0, -1.0)[:, None, None]
            split = (blk * sign).sum() / (f * f * ch)
            out[r:r + f, c:c + f] = blk.mean(axis=(0, 1)) + sign * split
    return out


def test_codec_matches_lowpass_oracle():
    codec = D.LatentCodec()
    rng = np.random.default_rng(0)
    for _ in range(5):
        img = Image(rng.random((16, 16, 3)))
        assert np.abs(codec.decode(codec.encode(img)) - lowpass_oracle(img.pixels)).max() < 1e-10


def test_codec_properties():
    codec = D.LatentCodec()
    A = codec.analysis_matrix
    assert A.shape == (4, 48) and np.allclose(A @ A.T, np.eye(4), atol=1e-15)
    with pytest.raises(ValueError):
        A[0, 0] = 1.0
    const = Image(np.full((16, 16, 3), 0.25))
    z = codec.encode(const)
    assert z.shape == (4, 4, 4) and np.abs(z[3]).max() < 1e-15
    assert np.abs(codec.decode(z) - 0.25).max() < 1e-15
    lat = np.random.default_rng(1).normal(size=(4, 4, 4))
    assert np.abs(codec.encode(Image(np.clip(codec.decode(lat), 0, 1))) - lat).max() > 0  # clamp is lossy
    blocks = codec._blocks(codec.decode(lat)) @ A.T
    assert np.abs(blocks.transpose(2, 0, 1) - lat).max() < 1e-12  # analysis inverts synthesis
    with pytest.raises(ValueError):
        codec.encode(Image(np.zeros((8, 8, 3))))
    with pytest.raises(ValueError):
        D.LatentCodec(tile=10)


def test_schedule():
    lv = D.NoiseSchedule().levels
    assert lv[0] == 0.05 and lv[-1] == 0.95 and len(lv) == 8
    with pytest.raises(ValueError):
        D.NoiseSchedule(low=0.0).levels
    with pytest.raises(ValueError):
        D.NoiseSchedule(low=0.9, high=0.5).levels
    x0, eps = np.ones((2, 3)), np.zeros((2, 3))
    assert np.allclose(D.NoiseSchedule().noise(x0, [0, 7], eps)[1], np.sqrt(0.05))


def test_stage_channel_counts():
    s1 = D.Detokenizer(D.DetokConfig(stage=1))
    assert s1.in_channels == s1.cfg.latent_channels == 4
    s2 = D.expand_to_stage2(s1)
    assert s2.in_channels == 2 * s1.in_channels == 8
    assert s2.params["denoiser.in_proj.w"].shape[0] == 8
    with pytest.raises(ValueError):
        D.Detokenizer(D.DetokConfig(stage=3))
    with pytest.raises(ValueError, match="channels"):
        D.Detokenizer(D.DetokConfig(stage=2), s1.params)
    with pytest.raises(ValueError):
        D.expand_to_stage2(s2)


def test_surgery_is_exact_at_zero_condition():
    rng = np.random.default_rng(2)
    s1 = D.Detokenizer(D.DetokConfig(stage=1, seed=3))
    for p in s1.params.values():
        p.data = p.data + rng.normal(0, 0.1, p.shape)
    s2 = D.expand_to_stage2(s1)
    feats = rng.normal(size=(64, 16))
    zero = np.zeros((4, 4, 4))
    for t in range(8):
        x = rng.normal(size=(4, 4, 4))
        assert np.array_equal(s1.denoise_step(x, t, feats), s2.denoise_step(x, t, feats, zero))
    assert np.array_equal(s1.decode(feats, seed=4).pixels, s2.decode(feats, seed=4).pixels)


def test_condition_contract():
    s1 = D.Detokenizer()
    feats = np.zeros((64, 16))
    x = np.zeros((4, 4, 4))
    with pytest.raises(ValueError, match="no condition"):
        s1.denoise_step(x, 0, feats, np.zeros((4, 4, 4)))
    with pytest.raises(ValueError, match="condition image"):
        s1.decode(feats, Image(np.zeros((16, 16, 3))))
    s2 = D.expand_to_stage2(s1)
    with pytest.raises(ValueError, match="needs a condition"):
        s2.denoise_step(x, 0, feats)
    with pytest.raises(ValueError, match=r"\[64, 16\]"):
        s1.decode(np.zeros((64, 5)))


def test_stage1_trainable_set():
    s1 = D.Detokenizer()
    names = D.trainable_names(s1)
    assert names and all(n.startswith(("cond.", "denoiser.xattn.")) for n in names)
    assert "denoiser.in_proj.w" not in names
    assert set(D.trainable_names(D.expand_to_stage2(s1))) == set(s1.params)


def test_decode_is_seeded():
    m = D.Detokenizer()
    f = np.random.default_rng(5).normal(size=(64, 16))
    assert np.array_equal(m.decode(f, seed=1).pixels, m.decode(f, seed=1).pixels)
    assert not np.array_equal(m.decode(f, seed=1).pixels, m.decode(f, seed=2).pixels)


def test_save_load_roundtrip(tmp_path):
    m = D.expand_to_stage2(D.Detokenizer(D.DetokConfig(seed=7)))
    m.save(tmp_path / "d")
    again = D.Detokenizer.load(tmp_path / "d")
    f = np.random.default_rng(6).normal(size=(64, 16))
    assert again.cfg == m.cfg
    assert np.array_equal(again.decode(f, seed=0).pixels, m.decode(f, seed=0).pixels)
    with pytest.raises(FileNotFoundError):
        D.Detokenizer.load(tmp_path / "missing")


@pytest.fixture(scope="module")
def toy_data():
    vit = VisualTokenizer()
    return [D.DetokExample(vit.tokenize(im).embeddings, im, im) for im in toy_images(16)]


@pytest.fixture(scope="module")
def trained(toy_data, tmp_path_factory):
    csv_path = tmp_path_factory.mktemp("dt") / "metrics.csv"
    s1 = D.Detokenizer()
    before = {n: p.data.copy() for n, p in s1.params.items()}
    m1 = D.train_detok(s1, toy_data, steps=200, seed=0, metrics_csv=csv_path)
    return s1, before, m1, csv_path


def test_stage1_training_reduces_loss_and_freezes_rest(trained, toy_data):
    s1, before, metrics, csv_path = trained
    first = np.mean([m["loss"] for m in metrics[:10]])
    last = np.mean([m["loss"] for m in metrics[-10:]])
    assert last <= 0.2 * first
    names = set(D.trainable_names(s1))
    for n, p in s1.params.items():
        assert np.array_equal(p.data, before[n]) != (n in names), n
    rows = list(csv.reader(open(csv_path)))
    assert rows[0] == ["step", "loss", "stage"] and len(rows) == 201


def test_stage1_beats_mean_latent(trained, toy_data):
    s1 = trained[0]
    assert D.reconstruction_mse(s1, toy_data) < D.mean_latent_baseline(s1, toy_data)


def test_surgery_preserves_unconditioned_reconstruction(trained, toy_data):
    s2 = D.expand_to_stage2(trained[0])
    plain = D.reconstruction_mse(trained[0], toy_data[:3], space="pixel")
    zero = D.reconstruction_mse(s2, toy_data[:3], conditions=[None] * 3, space="pixel")
    assert plain == zero
