import numpy as np
import pytest
import torch

from conftest import tiny_config
from srkn import io
from srkn.model import SRKN


def test_array_container_roundtrip(tmp_path, rng):
    arrays = {
        "floats": rng.normal(size=(3, 4, 2)),
        "ints": rng.integers(-5, 5, size=(7,)),
        "bytes": rng.integers(0, 255, size=(2, 2)).astype(np.uint8),
        "flags": rng.uniform(size=(6,)) < 0.5,
        "scalar": np.array(3.5),
    }
    meta = {"name": "test", "nested": {"a": 1, "b": [1, 2]}}
    path = tmp_path / "arrays.srkn"
    io.write_arrays(path, arrays, meta)
    back, back_meta = io.read_arrays(path)
    assert back_meta == meta
    assert set(back) == set(arrays)
    for key, value in arrays.items():
        assert back[key].dtype == np.asarray(value).dtype
        np.testing.assert_array_equal(back[key], value)


def test_array_container_deterministic_bytes(tmp_path, rng):
    arrays = {"b": rng.normal(size=(2, 2)), "a": rng.normal(size=(3,))}
    p1, p2 = tmp_path / "one.srkn", tmp_path / "two.srkn"
    io.write_arrays(p1, arrays, {"k": 1})
    # insertion order must not matter: names are serialized sorted
    io.write_arrays(p2, dict(reversed(list(arrays.items()))), {"k": 1})
    assert p1.read_bytes() == p2.read_bytes()


def test_array_container_rejects_garbage(tmp_path):
    path = tmp_path / "bad.srkn"
    path.write_bytes(b"not a container at all")
    with pytest.raises(ValueError):
        io.read_arrays(path)


def test_checkpoint_roundtrip(tmp_path):
    cfg = tiny_config(init_seed=8)
    model = SRKN(cfg)
    extra = {"opt.step": np.array(3.0)}
    path = tmp_path / "model.srkn"
    io.save_checkpoint(path, cfg, model.state_dict(), extra=extra,
                       meta={"epochs_run": 2})
    ckpt = io.load_checkpoint(path)
    assert ckpt.config == cfg
    assert ckpt.meta["epochs_run"] == 2
    np.testing.assert_array_equal(ckpt.extra["opt.step"], 3.0)

    rebuilt = io.build_model(ckpt)
    for key, value in model.state_dict().items():
        assert torch.equal(value, rebuilt.state_dict()[key])

    x = torch.randn(2, 4, 2, dtype=torch.float64,
                    generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        s1, _ = model.filter_sequence(x)
        s2, _ = rebuilt.filter_sequence(x)
    assert torch.equal(s1[-1].z_post.mean, s2[-1].z_post.mean)


def test_checkpoint_bytes_deterministic(tmp_path):
    cfg = tiny_config(init_seed=8)
    model = SRKN(cfg)
    p1, p2 = tmp_path / "a.srkn", tmp_path / "b.srkn"
    io.save_checkpoint(p1, cfg, model.state_dict())
    io.save_checkpoint(p2, cfg, model.state_dict())
    assert p1.read_bytes() == p2.read_bytes()


def test_load_checkpoint_rejects_plain_arrays(tmp_path):
    path = tmp_path / "plain.srkn"
    io.write_arrays(path, {"x": np.zeros(3)}, {"kind": "something-else"})
    with pytest.raises(ValueError):
        io.load_checkpoint(path)
