import numpy as np
import pytest

from diffalign.data import make_shapes
from diffalign.finetune import RunMetrics
from diffalign.io import (
    MAGIC,
    FormatError,
    export_image,
    image_bytes,
    load_adapters,
    load_dataset,
    load_detector,
    load_model,
    read_metrics_csv,
    read_pgm,
    save_adapters,
    save_dataset,
    save_detector,
    save_model,
    write_metrics_csv,
)
from diffalign.lora import attach_lora, set_active_window
from diffalign.rewards import ConceptDetector, ConceptRemovalReward

from helpers import tiny_denoiser, tiny_schedule


def test_model_round_trip(tmp_path):
    p, s = tiny_denoiser(), tiny_schedule()
    save_model(tmp_path / "m.bin", p, s)
    q, s2 = load_model(tmp_path / "m.bin")
    assert set(q.tensors) == set(p.tensors)
    assert all(np.array_equal(q.tensors[k].data, p.tensors[k].data) for k in p.tensors)
    assert (q.data_dim, q.n_classes, q.hidden, q.T) == (p.data_dim, p.n_classes, p.hidden, p.T)
    assert np.array_equal(s2.alpha_bar, s.alpha_bar)
    x = np.random.default_rng(0).normal(size=(2, 4))
    assert np.array_equal(p(x, np.array([1, 2]), np.array([0, 1])).data,
                          q(x, np.array([1, 2]), np.array([0, 1])).data)


def test_adapter_round_trip_keeps_window(tmp_path):
    p = tiny_denoiser()
    a = attach_lora(p, 2, np.random.default_rng(0))
    for b in a.blocks.values():
        b.up.data = np.random.default_rng(1).normal(size=b.up.shape)
    a = set_active_window(a, 2, 3, 3)
    save_adapters(tmp_path / "a.bin", a, tiny_schedule())
    b = load_adapters(tmp_path / "a.bin")
    assert b.window == (2, 3) and b.rank == 2 and b.hosts == a.hosts
    assert all(np.array_equal(b.named_arrays()[k], v) for k, v in a.named_arrays().items())


def test_detector_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    r = ConceptRemovalReward(ConceptDetector(rng.normal(size=256), 0.125))
    save_detector(tmp_path / "d.bin", r)
    back = load_detector(tmp_path / "d.bin")
    assert np.array_equal(back.detector.weight, r.detector.weight) and back.detector.bias == 0.125


def test_dataset_round_trip(tmp_path):
    ds = make_shapes(2, 0)
    save_dataset(tmp_path / "x.bin", ds)
    back = load_dataset(tmp_path / "x.bin")
    assert np.array_equal(back.images, ds.images)
    assert np.array_equal(back.labels, ds.labels) and np.array_equal(back.stripes, ds.stripes)


def test_container_starts_with_magic(tmp_path):
    save_model(tmp_path / "m.bin", tiny_denoiser(), tiny_schedule())
    assert (tmp_path / "m.bin").read_bytes()[:8] == MAGIC


def test_bad_magic_and_wrong_kind(tmp_path):
    (tmp_path / "junk.bin").write_bytes(b"NOTAFILE" + bytes(40))
    with pytest.raises(FormatError):
        load_model(tmp_path / "junk.bin")
    save_model(tmp_path / "m.bin", tiny_denoiser(), tiny_schedule())
    with pytest.raises(FormatError):
        load_adapters(tmp_path / "m.bin")


def test_truncated_container(tmp_path):
    save_model(tmp_path / "m.bin", tiny_denoiser(), tiny_schedule())
    raw = (tmp_path / "m.bin").read_bytes()
    (tmp_path / "cut.bin").write_bytes(raw[:-9])
    with pytest.raises(FormatError):
        load_model(tmp_path / "cut.bin")


# images

def test_pixel_mapping():
    assert list(image_bytes(np.full(256, -1.0)).ravel()[:1]) == [0]
    assert image_bytes(np.full(256, 1.0)).ravel()[0] == 255
    assert image_bytes(np.zeros(256)).ravel()[0] == 128
    assert image_bytes(np.full(256, 5.0)).ravel()[0] == 255
    assert image_bytes(np.full(256, -3.0)).ravel()[0] == 0


def test_pgm_round_trip(tmp_path):
    x = np.random.default_rng(0).uniform(-1, 1, size=256)
    path = export_image(x, tmp_path / "img.pgm")
    assert path.read_bytes().startswith(b"P5\n16 16\n255\n")
    assert np.array_equal(read_pgm(path), image_bytes(x))


def test_image_size_checked():
    with pytest.raises(ValueError):
        image_bytes(np.zeros(100))


# metrics

def test_metrics_csv_round_trip(tmp_path):
    m = RunMetrics()
    m.append(0, 0.25, -0.25, 3, None, 120, 0.0)
    m.append(1, 0.1 + 0.2, -(0.1 + 0.2), 1, 1.5, 40, 0.0)
    write_metrics_csv(tmp_path / "m.csv", m)
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "step,mean_reward,loss,K_drawn,diversity,saved_values,wall_ms"
    back = read_metrics_csv(tmp_path / "m.csv")
    assert list(back.rows()) == list(m.rows())


def test_metrics_csv_rejects_other_columns(tmp_path):
    (tmp_path / "m.csv").write_text("a,b\n1,2\n")
    with pytest.raises(FormatError):
        read_metrics_csv(tmp_path / "m.csv")
