import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from PIL import Image

from classkit.data import (DatasetManifest, decode_pnm, encode_pnm, generate, load_dataset, read_image,
                           read_manifest, render_sample, to_bytes, write_image)
from classkit.errors import ContractError, ManifestError, NetpbmFormatError, NetpbmParseError


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.uint8, st.tuples(st.integers(1, 9), st.integers(1, 9))),
       st.lists(st.text("abc =0123", max_size=12), max_size=2))
def test_pgm_round_trip(values, comments):
    out, got = decode_pnm(encode_pnm(values, comments))
    assert out.dtype == np.uint8
    np.testing.assert_array_equal(out, values)
    assert got == [c.strip() for c in comments]


def test_ppm_round_trip_and_pillow_agree(tmp_path):
    rng = np.random.default_rng(0)
    rgb = rng.integers(0, 256, size=(3, 5, 7), dtype=np.uint8)
    write_image(tmp_path / "a.ppm", rgb, ["kind=ellipse"])
    np.testing.assert_array_equal(np.moveaxis(np.asarray(Image.open(tmp_path / "a.ppm")), -1, 0), rgb)
    gray = rng.integers(0, 256, size=(6, 4), dtype=np.uint8)
    buf = io.BytesIO()
    Image.fromarray(gray).save(buf, format="PPM")
    decoded, _ = decode_pnm(buf.getvalue())
    np.testing.assert_array_equal(decoded, gray)


def test_quantisation_rule(tmp_path):
    assert to_bytes(np.array([0.5]))[0] == 128
    np.testing.assert_array_equal(to_bytes(np.array([-0.2, 0.0, 1 / 510 - 1e-12, 1 / 510, 1.0, 1.7])),
                                  [0, 0, 0, 1, 255, 255])
    write_image(tmp_path / "h.pgm", np.full((2, 2), 0.5))
    np.testing.assert_array_equal(read_image(tmp_path / "h.pgm"), 128 / 255)


def test_malformed_inputs():
    good = encode_pnm(np.arange(12, dtype=np.uint8).reshape(3, 4))
    with pytest.raises(NetpbmFormatError):
        decode_pnm(b"P2" + good[2:])
    with pytest.raises(NetpbmParseError) as info:
        decode_pnm(good[:-3])
    assert info.value.offset == len(good) - 3 and "offset" in str(info.value)
    for bad in (good[:5], b"P5\n4 x\n255\n", b"P5\n4 3\n65535\n" + bytes(24), good + b"\0", b"P5\n0 3\n255\n"):
        with pytest.raises(NetpbmParseError):
            decode_pnm(bad)


def test_generation_is_byte_deterministic(tmp_path):
    generate(3, 6, 32, tmp_path / "a")
    generate(3, 6, 32, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 13
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    generate(4, 6, 32, tmp_path / "c")
    assert (tmp_path / "a/images/s00000.ppm").read_bytes() != (tmp_path / "c/images/s00000.ppm").read_bytes()


def test_generator_scenario_mix_over_500_samples():
    samples = [render_sample(0, i, 64) for i in range(500)]
    fractions = np.array([s.mask.mean() for s in samples])
    assert fractions.min() >= 0.02 and fractions.max() <= 0.7
    assert all(set(np.unique(s.mask)) <= {0.0, 1.0} for s in samples)
    assert np.mean([s.meta["kind"] == "two_tone" for s in samples]) >= 0.3
    assert np.mean([s.meta["distractors"] >= 1 for s in samples]) >= 0.3
    assert all(0 <= s.meta["distractors"] <= 3 for s in samples)


def test_two_tone_objects_have_two_colours():
    for i in range(40):
        s = render_sample(1, i, 64)
        if s.meta["kind"] != "two_tone":
            continue
        inside = s.image[:, s.mask[0] > 0].T
        spread = np.abs(inside - inside.mean(axis=0)).sum(axis=1)
        # two well separated colour clusters, each far from the mean
        assert np.median(spread) > 60 / 255


def test_loaded_equals_rendered(tmp_path):
    manifest = generate(5, 8, 32, tmp_path)
    loaded = load_dataset(tmp_path / "manifest.txt")
    assert [s.id for s in loaded] == [e[0] for e in manifest.entries]
    for i, s in enumerate(loaded):
        ref = render_sample(5, i, 32)
        assert np.abs(s.image - ref.image).max() <= 1 / 255
        np.testing.assert_array_equal(s.mask, ref.mask)
        assert s.meta == ref.meta
    back = read_manifest(tmp_path / "manifest.txt")
    assert back.seed == 5 and back.split == "train" and back.entries == manifest.entries


def test_manifest_order_and_errors(tmp_path):
    manifest = generate(6, 5, 32, tmp_path)
    order = [4, 1, 3, 0, 2]
    shuffled = DatasetManifest(tmp_path, [manifest.entries[i] for i in order], "val", 6)
    shuffled.write(tmp_path / "shuffled.txt")
    assert [s.id for s in load_dataset(tmp_path / "shuffled.txt")] == [f"s{i:05d}" for i in order]

    with pytest.raises(ContractError):
        load_dataset(DatasetManifest(tmp_path, []))
    (tmp_path / "empty.txt").write_text("classkit-manifest v1\n")
    with pytest.raises(ContractError):
        load_dataset(tmp_path / "empty.txt")

    (tmp_path / "masks/s00003.pgm").unlink()
    with pytest.raises(ManifestError, match="s00003"):
        load_dataset(tmp_path / "manifest.txt")

    (tmp_path / "bad.txt").write_text("not a manifest\n")
    with pytest.raises(ManifestError):
        read_manifest(tmp_path / "bad.txt")
    (tmp_path / "dup.txt").write_text("classkit-manifest v1\na\tx\ty\na\tx\ty\n")
    with pytest.raises(ManifestError, match="duplicate"):
        read_manifest(tmp_path / "dup.txt")


def test_mask_binarised_at_128(tmp_path):
    (tmp_path / "m").mkdir()
    write_image(tmp_path / "m/x.ppm", np.zeros((3, 1, 4)))
    write_image(tmp_path / "m/x.pgm", np.array([[0, 127, 128, 255]], dtype=np.uint8))
    DatasetManifest(tmp_path / "m", [("x", "x.ppm", "x.pgm")]).write()
    (sample,) = load_dataset(tmp_path / "m/manifest.txt")
    np.testing.assert_array_equal(sample.mask, [[[0, 0, 1, 1]]])


def test_generate_preconditions(tmp_path):
    with pytest.raises(ContractError):
        generate(0, 0, 32, tmp_path)
    with pytest.raises(ContractError):
        generate(0, 2, 40, tmp_path)
