import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from spda.core import (
    DataError,
    DatasetManifest,
    ManifestEntry,
    Provenance,
    Sample,
    SeededRng,
    load_sample,
    read_image,
    read_label,
    read_raw,
    save_sample,
    write_image,
    write_label,
    write_raw,
)
from spda.synthetic import SyntheticConfig, generate_samples, generate_synthetic


def test_gray_png_all_255_loads_as_ones(tmp_path):
    Image.fromarray(np.full((5, 7), 255, np.uint8)).save(tmp_path / "a.png")
    Image.fromarray(np.zeros((5, 7), np.uint8)).save(tmp_path / "a_label.png")
    s = load_sample(tmp_path / "a.png", tmp_path / "a_label.png", num_classes=2)
    assert s.image.shape == (5, 7, 1)
    assert s.image.dtype == np.float32
    assert np.all(s.image == 1.0)


def test_label_id_out_of_range_rejected(tmp_path):
    Image.fromarray(np.zeros((4, 4), np.uint8)).save(tmp_path / "a.png")
    lab = np.zeros((4, 4), np.uint8)
    lab[1, 2] = 5
    Image.fromarray(lab).save(tmp_path / "l.png")
    with pytest.raises(DataError):
        load_sample(tmp_path / "a.png", tmp_path / "l.png", num_classes=3)


def test_shape_mismatch_rejected(tmp_path):
    Image.fromarray(np.zeros((4, 4), np.uint8)).save(tmp_path / "a.png")
    Image.fromarray(np.zeros((4, 5), np.uint8)).save(tmp_path / "l.png")
    with pytest.raises(DataError):
        load_sample(tmp_path / "a.png", tmp_path / "l.png", num_classes=3)


def test_garbage_file_rejected(tmp_path):
    (tmp_path / "a.png").write_bytes(b"not a png")
    with pytest.raises(DataError):
        read_image(tmp_path / "a.png")
    (tmp_path / "a.vol").write_bytes(b"SPDAVOL1")
    with pytest.raises(DataError):
        read_raw(tmp_path / "a.vol")


def test_raw_round_trip_is_bit_identical(tmp_path):
    x = np.random.default_rng(3).random((16, 16, 1)).astype(np.float32)
    write_raw(tmp_path / "x.vol", x)
    y = read_raw(tmp_path / "x.vol")
    assert y.shape == x.shape
    assert y.tobytes() == x.tobytes()


def test_raw_header_layout(tmp_path):
    v = np.arange(2 * 3 * 4 * 2, dtype=np.float32).reshape(2, 3, 4, 2)
    write_raw(tmp_path / "v.vol", v)
    buf = (tmp_path / "v.vol").read_bytes()
    assert buf[:8] == b"SPDAVOL1" and buf[8:16] == b"\0" * 8
    assert np.frombuffer(buf[16:32], "<u4").tolist() == [2, 3, 4, 2]
    assert len(buf) == 32 + 4 * v.size
    np.testing.assert_array_equal(read_raw(tmp_path / "v.vol"), v)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.sampled_from([1, 3]), st.integers(0, 2**32 - 1))
def test_png_round_trip_within_quantization(tmp_path_factory, h, w, c, seed):
    d = tmp_path_factory.mktemp("png")
    x = np.random.default_rng(seed).random((h, w, c)).astype(np.float32)
    write_image(d / "x.png", x)
    y = read_image(d / "x.png")
    assert y.shape == x.shape
    assert np.max(np.abs(y - x)) <= 0.5 / 255 + 1e-6
    # quantized values survive a second trip exactly
    write_image(d / "y.png", y)
    assert np.array_equal(read_image(d / "y.png"), y)


def test_label_volume_round_trip(tmp_path):
    lab = np.random.default_rng(0).integers(0, 4, size=(3, 5, 6))
    write_label(tmp_path / "l.vol", lab)
    np.testing.assert_array_equal(read_label(tmp_path / "l.vol"), lab)


def test_sample_is_immutable():
    s = Sample(np.zeros((4, 4, 1)), np.zeros((4, 4), int), 2)
    with pytest.raises(ValueError):
        s.image[0, 0, 0] = 1.0


def test_sample_rejects_non_finite():
    img = np.zeros((4, 4, 1))
    img[0, 0, 0] = np.nan
    with pytest.raises(DataError):
        Sample(img, np.zeros((4, 4), int), 2)


def test_spda_provenance_requires_s():
    with pytest.raises(DataError):
        Provenance("spda")


def test_manifest_round_trip_and_validation(tmp_path):
    samples = generate_samples(SyntheticConfig(size=32, num_samples=3), 5)
    entries = [save_sample(s, tmp_path, s.id) for s in samples]
    m = DatasetManifest(entries, 3, tmp_path)
    m.save(tmp_path / "m.json")
    doc = json.loads((tmp_path / "m.json").read_text())
    assert doc["n"] == 3 and len(doc["samples"]) == 3
    assert set(doc["samples"][0]) == {"id", "image", "label", "provenance"}
    back = DatasetManifest.read(tmp_path / "m.json")
    assert back.n == 3
    loaded = back.load_all()
    for a, b in zip(samples, loaded):
        np.testing.assert_array_equal(a.label, b.label)
        assert np.max(np.abs(a.image - b.image)) <= 0.5 / 255 + 1e-6

    dup = DatasetManifest(entries + [entries[0]], 3, tmp_path)
    with pytest.raises(DataError):
        dup.validate()
    missing = DatasetManifest([ManifestEntry("x", "nope.png", "nope_label.png")], 3, tmp_path)
    with pytest.raises(DataError):
        missing.validate()


def test_rng_streams_reproducible_and_independent():
    a, b = SeededRng(7), SeededRng(7)
    np.testing.assert_array_equal(a.stream("sampling").random(5), b.stream("sampling").random(5))
    assert not np.array_equal(a.stream("sampling").random(5), a.stream("init").random(5))
    assert not np.array_equal(SeededRng(7).stream("init").random(5), SeededRng(8).stream("init").random(5))


# --------------------------------------------------------------------------
# synthetic data
# --------------------------------------------------------------------------


def test_synthetic_is_deterministic():
    cfg = SyntheticConfig(size=48, num_samples=4)
    a, b = generate_samples(cfg, 11), generate_samples(cfg, 11)
    for x, y in zip(a, b):
        assert x.image.tobytes() == y.image.tobytes()
        assert np.array_equal(x.label, y.label)
    c = generate_samples(cfg, 12)
    assert any(not np.array_equal(x.label, z.label) for x, z in zip(a, c))


@pytest.mark.parametrize("num_classes", [2, 3, 4])
def test_synthetic_uses_every_class(num_classes):
    samples = generate_samples(SyntheticConfig(size=48, num_classes=num_classes, num_samples=5), 0)
    seen = set()
    for s in samples:
        seen |= set(np.unique(s.label).tolist())
        assert s.label.max() < num_classes
    assert seen == set(range(num_classes))


def test_synthetic_noise_free_regions_piecewise_constant():
    cfg = SyntheticConfig(size=48, num_classes=3, num_samples=3, noise_sigma=0.0)
    for s in generate_samples(cfg, 4):
        for cls in range(3):
            vals = np.unique(s.image[..., 0][s.label == cls])
            # two stripe levels per class, nothing in between
            assert len(vals) <= 2


def test_synthetic_config_errors(tmp_path):
    with pytest.raises(DataError):
        generate_samples(SyntheticConfig(num_samples=0), 0)
    with pytest.raises(DataError):
        generate_samples(SyntheticConfig(size=16), 0)
    with pytest.raises(DataError):
        generate_samples(SyntheticConfig(num_classes=5), 0)


def test_generate_synthetic_writes_manifest(tmp_path):
    m = generate_synthetic(SyntheticConfig(size=32, num_samples=2), 0, tmp_path)
    again = DatasetManifest.read(tmp_path / "manifest.json")
    assert again.n == m.n == 2
    assert all(e.provenance.kind == "original" for e in again.entries)
