import numpy as np
import pytest

from sodiff.data import NoUsableImagesError, ingest, make_batch, random_crop, sample_qf, step_rng, synthetic_corpus, write_corpus, write_png


def test_ingest_empty(tmp_path):
    with pytest.raises(NoUsableImagesError, match="no usable images"):
        ingest(tmp_path)


def test_ingest_skips_undersized_and_corrupt(tmp_path):
    write_corpus(tmp_path, synthetic_corpus(10, 64, seed=0))
    write_png(tmp_path / "small_a.png", np.zeros((32, 80, 3)))
    write_png(tmp_path / "small_b.png", np.zeros((40, 40, 3)))
    (tmp_path / "broken.png").write_bytes(b"not a png")
    index = ingest(tmp_path)
    assert len(index) == 10
    assert index.skipped == 3


def test_same_seed_same_crops(tiny_dataset):
    _, index, _ = tiny_dataset

    def run(seed):
        out = []
        for step in range(5):
            rng = step_rng(seed, step)
            b = make_batch(index, [0, 1, 2], rng, crop=32)
            out.append((b.hq.numpy(), b.qf.numpy()))
        return out

    a, b, c = run(7), run(7), run(8)
    for (ha, qa), (hb, qb) in zip(a, b):
        assert np.array_equal(ha, hb) and np.array_equal(qa, qb)
    assert any(not np.array_equal(x[0], y[0]) for x, y in zip(a, c))


def test_random_crop_flip():
    im = np.random.default_rng(0).random((20, 30, 3))
    seen_flip = False
    for s in range(20):
        c = random_crop(im, 8, np.random.default_rng(s))
        assert c.shape == (8, 8, 3)
        seen_flip |= not any(np.array_equal(c, im[i : i + 8, j : j + 8]) for i in range(13) for j in range(23))
    assert seen_flip


@pytest.mark.parametrize("mode", ["uniform", "stratified"])
def test_sample_qf_range(mode):
    rng = np.random.default_rng(0)
    qs = [sample_qf(rng, (5, 95), mode) for _ in range(2000)]
    assert min(qs) >= 5 and max(qs) <= 95
    assert len(set(qs)) > 60


def test_sample_qf_bad_mode():
    with pytest.raises(ValueError):
        sample_qf(np.random.default_rng(0), (5, 95), "gaussian")


def test_batch_lq_is_codec_output(tiny_dataset):
    from sodiff.jpeg_codec import degrade

    _, index, _ = tiny_dataset
    b = make_batch(index, [0], step_rng(0, 0), crop=64, fixed_qf=10, flip=False)
    ref = degrade(index.images[0], 10)
    np.testing.assert_allclose(b.lq[0].permute(1, 2, 0).numpy(), ref, atol=1e-6)
    assert float(b.qf[0]) == 10
