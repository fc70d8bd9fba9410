import numpy as np
import pytest

from data import (
    ICRD_HEADER,
    Dataset,
    gen_blobs,
    gen_glyphs,
    glyph_templates,
    load_csv_dataset,
    load_icrd,
    one_hot,
    one_hot_batch,
    save_icrd,
)
from errors import DomainError, FormatError, ParseError


def _assert_same(a, b):
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert a.class_count == b.class_count


def test_one_hot():
    np.testing.assert_array_equal(one_hot(0, 3), [1.0, 0.0, 0.0])
    np.testing.assert_array_equal(one_hot(2, 5), [0.0, 0.0, 1.0, 0.0, 0.0])
    assert one_hot(4, 9).sum() == 1.0
    with pytest.raises(DomainError):
        one_hot(3, 3)
    np.testing.assert_array_equal(one_hot_batch([1, 0], 2), [[0.0, 1.0], [1.0, 0.0]])


def test_dataset_validation():
    with pytest.raises(DomainError):
        Dataset(np.zeros((2, 1, 2, 2)), np.array([0, 3]), 3)
    with pytest.raises(DomainError):
        Dataset(np.full((1, 1, 2, 2), 1.5), np.array([0]), 2)
    with pytest.raises(DomainError):
        Dataset(np.zeros((2, 2, 2)), np.array([0, 1]), 2)
    with pytest.raises(DomainError):
        Dataset(np.zeros((2, 1, 2, 2)), np.array([0]), 2)


def test_icrd_round_trip(tmp_path):
    dataset = gen_glyphs(5, 4, 10, 12, noise=0.05, seed=3)
    path = tmp_path / "glyphs.icrd"
    save_icrd(dataset, path)
    assert path.stat().st_size == ICRD_HEADER + 20 + 20 * 10 * 12
    loaded = load_icrd(path)
    _assert_same(dataset, loaded)
    save_icrd(loaded, tmp_path / "again.icrd")
    assert (tmp_path / "again.icrd").read_bytes() == path.read_bytes()


def test_icrd_blobs_survive_round_trip(tmp_path):
    dataset = gen_blobs(20, 3, 4, 0.2, seed=1)
    save_icrd(dataset, tmp_path / "blobs.icrd")
    _assert_same(dataset, load_icrd(tmp_path / "blobs.icrd"))


def test_icrd_empty_and_endpoint(tmp_path):
    empty = Dataset(np.zeros((0, 1, 3, 3)), np.zeros(0, dtype=np.int64), 2)
    save_icrd(empty, tmp_path / "empty.icrd")
    assert (tmp_path / "empty.icrd").stat().st_size == ICRD_HEADER == 25
    assert load_icrd(tmp_path / "empty.icrd").n == 0

    white = Dataset(np.ones((1, 1, 1, 1)), np.array([0]), 1)
    save_icrd(white, tmp_path / "white.icrd")
    assert load_icrd(tmp_path / "white.icrd").images[0, 0, 0, 0] == 1.0


def test_icrd_errors(tmp_path):
    dataset = gen_glyphs(2, 3, 8, 8, noise=0.0, seed=0)
    save_icrd(dataset, tmp_path / "ok.icrd")
    blob = (tmp_path / "ok.icrd").read_bytes()

    cases = {
        "magic": (b"XXXX1" + blob[5:], 0),
        "short": (blob[:-1], len(blob) - 1),
        "header": (blob[:10], 10),
        "trailing": (blob + b"\x00", len(blob)),
    }
    for name, (content, offset) in cases.items():
        path = tmp_path / f"{name}.icrd"
        path.write_bytes(content)
        with pytest.raises(FormatError) as err:
            load_icrd(path)
        assert err.value.offset == offset, name

    bad_label = bytearray(blob)
    bad_label[ICRD_HEADER + 1] = 7
    (tmp_path / "label.icrd").write_bytes(bytes(bad_label))
    with pytest.raises(FormatError) as err:
        load_icrd(tmp_path / "label.icrd")
    assert err.value.offset == ICRD_HEADER + 1


def test_csv_dataset(tmp_path):
    path = tmp_path / "data.csv"
    path.write_text("3,0,0,0,255\n1,255,0,51,0\n", encoding="utf-8")
    dataset = load_csv_dataset(path, 4, 2, 2)
    np.testing.assert_array_equal(dataset.labels, [3, 1])
    np.testing.assert_array_equal(dataset.images[0, 0].ravel(), [0.0, 0.0, 0.0, 1.0])
    assert dataset.images[1, 0, 1, 0] == pytest.approx(0.2, abs=1e-15)
    assert dataset.sample_shape == (1, 2, 2)


def test_csv_empty_file(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("", encoding="utf-8")
    assert load_csv_dataset(path, 3, 2, 2).n == 0


@pytest.mark.parametrize("content,line", [
    ("0,1,2,3,4\n1,1,2,3\n", 2),
    ("0,1,2,3,4\n0,1,x,3,4\n", 2),
    ("5,1,2,3,4\n", 1),
    ("0,1,2,3,256\n", 1),
    ("0,1,2,3,4\n0,1,2,3,4\n0,1.5,2,3,4\n", 3),
    ("3,0,0,255\n1,0,0,0,255\n1,0,0,0,255\n", 1),
    ("0,1,2,3,4\n0,1,2,3,4,5\n", 2),
])
def test_csv_errors_name_the_line(tmp_path, content, line):
    path = tmp_path / "bad.csv"
    path.write_text(content, encoding="utf-8")
    with pytest.raises(ParseError) as err:
        load_csv_dataset(path, 5, 2, 2)
    assert err.value.line == line


def test_blobs():
    dataset = gen_blobs(100, 2, 2, 0.1, seed=0)
    assert dataset.n == 200
    assert dataset.sample_shape == (1, 1, 2)
    np.testing.assert_array_equal(dataset.histogram(), [100, 100])
    _assert_same(dataset, gen_blobs(100, 2, 2, 0.1, seed=0))
    degenerate = gen_blobs(10, 3, 2, 0.0, seed=5)
    for c in range(3):
        members = degenerate.images[degenerate.labels == c]
        np.testing.assert_array_equal(members, np.broadcast_to(members[0], members.shape))
    with pytest.raises(DomainError):
        gen_blobs(10, 1, 2, 0.1)


def test_glyphs():
    dataset = gen_glyphs(30, 8, 16, 16, noise=0.02, seed=2)
    np.testing.assert_array_equal(dataset.histogram(), [30] * 8)
    assert dataset.sample_shape == (1, 16, 16)
    assert set(np.unique(dataset.images)) <= {0.0, 1.0}
    _assert_same(dataset, gen_glyphs(30, 8, 16, 16, noise=0.02, seed=2))

    clean = gen_glyphs(5, 4, 12, 12, noise=0.0, seed=1, max_shift=0)
    templates = glyph_templates(4, 12, 12)
    for image, label in zip(clean.images, clean.labels):
        np.testing.assert_array_equal(image[0], templates[label])


def test_glyph_templates_are_distinct():
    templates = glyph_templates(16, 16, 16).reshape(16, -1)
    assert len({row.tobytes() for row in templates}) == 16
    with pytest.raises(DomainError):
        glyph_templates(17, 16, 16)
    with pytest.raises(DomainError):
        glyph_templates(4, 7, 16)


def test_subset_and_histogram():
    dataset = gen_blobs(4, 3, 2, 0.1, seed=0)
    part = dataset.subset([0, 5, 11])
    np.testing.assert_array_equal(part.labels, [0, 1, 2])
    np.testing.assert_array_equal(part.histogram(), [1, 1, 1])
