import itertools
import json
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmseq import kernel as K
from mmseq.dynres import (
    PositionEmbeddingParams,
    cell_centers,
    partition,
    plan_grid,
    position_embedding,
    position_embeddings,
    reassemble,
    select_grid,
    upsample,
)
from mmseq.image import Image, read_netpbm, write_netpbm


def brute_grid(H, W, Ht, Wt, bound=64):
    best = None
    for nh, nw in itertools.product(range(1, bound + 1), repeat=2):
        if nh * Ht >= H and nw * Wt >= W and (best is None or nh * nw < best[0] * best[1]):
            best = (nh, nw)
    return best


@pytest.mark.parametrize("args,want", [((448, 448, 448, 448), (1, 1)), ((500, 300, 224, 224), (3, 2)),
                                       ((449, 448, 448, 448), (2, 1))])
def test_select_grid_examples(args, want):
    assert select_grid(*args) == want
    assert brute_grid(*args) == want


@pytest.mark.parametrize("bad", [(0, 5, 4, 4), (5, -1, 4, 4), (5, 5, 0, 4), (5, 5, 4, -2)])
def test_select_grid_rejects_non_positive(bad):
    with pytest.raises(ValueError):
        select_grid(*bad)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 1500), st.integers(1, 1500), st.integers(24, 448), st.integers(24, 448))
def test_select_grid_minimal_against_brute_force(H, W, Ht, Wt):
    nh, nw = select_grid(H, W, Ht, Wt)
    assert (nh, nw) == brute_grid(H, W, Ht, Wt)
    assert nh * Ht >= H and nw * Wt >= W
    assert nh == 1 or (nh - 1) * Ht < H
    assert nw == 1 or (nw - 1) * Wt < W


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 3000), st.integers(1, 3000), st.integers(1, 500))
def test_select_grid_swap_symmetry(H, W, s):
    assert select_grid(H, W, s, s) == select_grid(W, H, s, s)[::-1]


def test_upsample_examples():
    rng = np.random.default_rng(0)
    img = Image(rng.random((5, 7, 3)))
    assert upsample(img, (5, 7)) == img
    const = Image(np.full((3, 4, 1), 0.3))
    assert np.allclose(upsample(const, (11, 2)).pixels, 0.3, atol=1e-15)
    checker = Image(np.array([[0.0, 1.0], [1.0, 0.0]])[..., None])
    out = upsample(checker, (3, 3))
    assert out.pixels.shape == (3, 3, 1)
    assert out.pixels[1, 1, 0] == 0.5


def test_upsample_corner_aligned():
    img = Image(np.random.default_rng(1).random((4, 6, 3)))
    out = upsample(img, (9, 13)).pixels
    for (r, c), (R, C) in zip([(0, 0), (0, 5), (3, 0), (3, 5)], [(0, 0), (0, 12), (8, 0), (8, 12)]):
        assert np.allclose(out[R, C], img.pixels[r, c], atol=1e-15)


def test_partition_single_tile():
    img = Image(np.random.default_rng(2).random((8, 8, 3)))
    plan, tiles, glob = partition(img, 8, 8)
    assert len(tiles) == 1 and tiles[0] == glob == img
    assert plan.cells[0].center == (0.5, 0.5)


def test_partition_500x300_reassembles_canvas():
    img = Image(np.random.default_rng(3).random((500, 300, 3)))
    plan, tiles, glob = partition(img, 224, 224)
    assert (plan.n_h, plan.n_w) == (3, 2) and len(tiles) == 6
    canvas = upsample(img, plan.upsampled_size).pixels
    assert np.array_equal(reassemble(plan, tiles), canvas)
    assert glob.pixels.shape == (224, 224, 3)
    assert glob == upsample(img, (224, 224))


def test_cells_tile_canvas_exactly():
    plan = plan_grid(500, 700, 128, 96)
    H, W = plan.upsampled_size
    cover = np.zeros((H, W), dtype=int)
    for c in plan.cells:
        t, l, b, r = c.rect
        assert (b - t, r - l) == (128, 96)
        cover[t:b, l:r] += 1
    assert np.all(cover == 1)


def test_centers():
    assert sorted(set(cell_centers(2, 2))) == [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)]
    for n_h, n_w in [(1, 1), (3, 5), (7, 2)]:
        plan = plan_grid(n_h * 10, n_w * 10, 10, 10)
        for c in plan.cells:
            x, y = c.center
            assert 0 < x < 1 and 0 < y < 1
            assert x == (c.col + 0.5) / n_w and y == (c.row + 0.5) / n_h


def random_params(rng, d=6):
    return PositionEmbeddingParams(*(K.parameter(rng.normal(size=d)) for _ in range(4)))


def test_position_embedding_examples():
    rng = np.random.default_rng(4)
    p = random_params(rng)
    l, r, t, b = (v.data for v in p.tensors())
    assert np.allclose(position_embedding(0.5, 0.5, p).data, (l + r + t + b) / 2, atol=1e-12)
    same = PositionEmbeddingParams(p.left, p.left, p.top, p.top)
    for x, y in [(0.1, 0.9), (0.6, 0.3)]:
        assert np.allclose(position_embedding(x, y, same).data, l + t, atol=1e-12)
    want = np.array([0.25 * l[i] + 0.75 * r[i] + 0.75 * t[i] + 0.25 * b[i] for i in range(len(l))])
    assert np.allclose(position_embedding(0.25, 0.75, p).data, want, atol=1e-12, rtol=0)


@pytest.mark.parametrize("xy", [(0.0, 0.5), (0.5, 1.0), (1.2, 0.3), (0.5, -0.1)])
def test_position_embedding_rejects_out_of_range(xy):
    with pytest.raises(ValueError):
        position_embedding(*xy, random_params(np.random.default_rng(0)))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 0.99), st.floats(0.01, 0.99), st.floats(0.01, 0.99),
       st.floats(0.01, 0.99), st.floats(0, 1))
def test_position_embedding_linear_and_reflection(seed, x1, y1, x2, y2, a):
    p = random_params(np.random.default_rng(seed))
    u, v = np.array([x1, y1]), np.array([x2, y2])
    mid = a * u + (1 - a) * v
    lhs = position_embedding(*mid, p).data
    rhs = a * position_embedding(*u, p).data + (1 - a) * position_embedding(*v, p).data
    assert np.abs(lhs - rhs).max() < 1e-12
    swapped_lr = PositionEmbeddingParams(p.right, p.left, p.top, p.bottom)
    assert np.abs(position_embedding(1 - x1, y1, swapped_lr).data - position_embedding(x1, y1, p).data).max() < 1e-12
    swapped_tb = PositionEmbeddingParams(p.left, p.right, p.bottom, p.top)
    assert np.abs(position_embedding(x1, 1 - y1, swapped_tb).data - position_embedding(x1, y1, p).data).max() < 1e-12


def test_batched_embeddings_match_single():
    rng = np.random.default_rng(5)
    p = random_params(rng)
    centers = cell_centers(3, 4) + [(0.5, 0.5)]
    batch = position_embeddings(centers, p).data
    for row, (x, y) in zip(batch, centers):
        assert np.allclose(row, position_embedding(x, y, p).data, atol=1e-14)


def test_netpbm_roundtrip(tmp_path):
    rng = np.random.default_rng(6)
    for ch, ext in ((3, "ppm"), (1, "pgm")):
        img = Image(np.round(rng.random((5, 4, ch)) * 255) / 255)
        write_netpbm(tmp_path / f"a.{ext}", img)
        assert read_netpbm(tmp_path / f"a.{ext}") == img


def test_netpbm_header_comments(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# a comment\n2 1\n# another\n255\n\x00\xff")
    assert read_netpbm(tmp_path / "c.pgm").pixels[:, :, 0].tolist() == [[0.0, 1.0]]


def test_image_validates():
    with pytest.raises(ValueError):
        Image(np.zeros((0, 3, 3)))
    with pytest.raises(ValueError):
        Image(np.zeros((2, 3, 2)))
    assert Image(np.full((1, 1, 1), 3.0)).pixels.max() == 1.0


def run_cli(*args):
    return subprocess.run([sys.executable, "-m", "mmseq.cli", *args], capture_output=True, text=True)


def test_cli_plan_grid():
    r = run_cli("plan-grid", "--height", "500", "--width", "300", "--tile", "224")
    assert r.returncode == 0
    out = json.loads(r.stdout)
    assert (out["n_h"], out["n_w"]) == (3, 2)
    r = run_cli("plan-grid", "--height", "224", "--width", "224", "--tile", "224")
    out = json.loads(r.stdout)
    assert (out["n_h"], out["n_w"]) == (1, 1) and out["centers"] == [[0.5, 0.5]]
    r = run_cli("plan-grid", "--height", "0", "--width", "300")
    assert r.returncode == 2 and "positive" in r.stderr


def test_cli_tile(tmp_path):
    img = Image(np.random.default_rng(7).random((20, 9, 3)))
    write_netpbm(tmp_path / "in.ppm", img)
    r = run_cli("tile", str(tmp_path / "in.ppm"), "--tile", "8", "--out", str(tmp_path / "out"))
    assert r.returncode == 0, r.stderr
    plan = json.loads((tmp_path / "out" / "plan.json").read_text())
    assert (plan["n_h"], plan["n_w"]) == (3, 2)
    assert len(plan["tiles"]) == 6
    tile = read_netpbm(tmp_path / "out" / plan["tiles"][0])
    assert tile.pixels.shape == (8, 8, 3)
    assert (tmp_path / "out" / "run_manifest.json").is_file()
