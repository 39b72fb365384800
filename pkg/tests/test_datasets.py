"""Toy generators, batch persistence, and the taxi corpus loader."""

import json
import math
from collections import defaultdict

import numpy as np
import pytest
import torch

from srkn.datasets import (CANVAS, SequenceBatch, TaxiConfig, TaxiDataError,
                           car_junctions, car_track_cells, denormalize_coords,
                           gen_car_images, gen_four_modes, load_batch,
                           load_taxi, locate_car, normalize_coords, on_track,
                           render_car, save_batch, split_batch,
                           write_synthetic_taxi_csv)


# ---- four-mode jumps ---------------------------------------------------------


def test_four_modes_noiseless_geometry():
    batch = gen_four_modes(64, seed=5, noise_scale=0.0)
    x = batch.data
    assert x.shape == (5, 64, 2) and batch.mask is None
    assert torch.equal(x[:3], torch.zeros(3, 64, 2, dtype=torch.float64))
    assert set(x[3].abs().unique().tolist()) == {1.0}
    assert torch.equal(x[4], 2.0 * x[3])
    modes = torch.tensor(batch.meta["modes"])
    want = (x[3, :, 0] < 0).long() * 2 + (x[3, :, 1] < 0).long()
    assert torch.equal(modes, want)


def test_four_modes_mode_frequencies_are_uniform():
    n = 4000
    modes = np.asarray(gen_four_modes(n, seed=0).meta["modes"])
    sigma = math.sqrt(0.25 * 0.75 / n)
    for k in range(4):
        assert abs((modes == k).mean() - 0.25) <= 3.0 * sigma


def test_four_modes_noise_scale():
    batch = gen_four_modes(4000, seed=1, noise_scale=0.05)
    early = batch.data[:3].numpy()
    assert abs(early.mean()) < 0.005
    assert abs(early.std() - 0.05) < 0.005
    signs = np.sign(batch.data[3].numpy())
    late = batch.data[4].numpy() - 2.0 * signs
    assert abs(late.std() - 0.05) < 0.005


def test_four_modes_determinism_and_validation():
    a, b = gen_four_modes(16, seed=7), gen_four_modes(16, seed=7)
    assert torch.equal(a.data, b.data) and a.meta == b.meta
    assert not torch.equal(a.data, gen_four_modes(16, seed=8).data)
    with pytest.raises(ValueError):
        gen_four_modes(0)
    assert a.meta["kind"] == "four_modes" and len(a.meta["modes"]) == 16


# ---- car-on-track images -----------------------------------------------------


def test_track_layout():
    cells = car_track_cells()
    # two stacked rectangle perimeters sharing the middle vertical edge
    assert len(cells) == 63
    assert len(set(cells)) == 63
    for row, col in cells:
        assert 1 <= row <= CANVAS - 2 and 1 <= col <= CANVAS - 2
    for junction in car_junctions():
        assert junction in cells
    assert on_track((8, 2)) and not on_track((0, 0))


def test_render_locate_roundtrip_on_every_cell():
    for cell in car_track_cells():
        frame = render_car(cell)
        assert float(frame.sum()) == 9.0
        assert locate_car(frame) == cell


def test_car_sequences_follow_the_track():
    batch = gen_car_images(40, seq_len=8, seed=11)
    assert batch.data.shape == (8, 40, CANVAS, CANVAS) and batch.is_image
    centers = batch.meta["centers"]
    for i in range(40):
        path = [tuple(c) for c in centers[i]]
        for t in range(8):
            frame = batch.data[t, i]
            assert float(frame.sum()) == 9.0
            assert locate_car(frame) == path[t]
            assert on_track(path[t])
            if t >= 1:
                dist = abs(path[t][0] - path[t - 1][0]) + abs(path[t][1] - path[t - 1][1])
                assert dist == 1
            if t >= 2:
                assert path[t] != path[t - 2], "car reversed"


def test_car_junction_choices_are_roughly_uniform():
    batch = gen_car_images(800, seq_len=30, seed=3)
    junctions = set(car_junctions())
    counts = defaultdict(lambda: defaultdict(int))
    for path, chosen in zip(batch.meta["centers"], batch.meta["branches"]):
        for step, d_row, d_col in chosen:
            pos = tuple(path[step])
            assert pos in junctions
            entry = (pos[0] - path[step - 1][0], pos[1] - path[step - 1][1]) \
                if step > 0 else None
            counts[(pos, entry)][(d_row, d_col)] += 1
    assert counts, "no junction visits recorded"
    for key, options in counts.items():
        total = sum(options.values())
        if total < 50 or key[1] is None:
            continue
        assert len(options) == 2, key
        frac = max(options.values()) / total
        assert frac < 0.5 + 3.0 * math.sqrt(0.25 / total) + 0.02, (key, frac)


def test_car_determinism_and_validation():
    a, b = gen_car_images(6, seq_len=5, seed=2), gen_car_images(6, seq_len=5, seed=2)
    assert torch.equal(a.data, b.data) and a.meta == b.meta
    assert not torch.equal(a.data, gen_car_images(6, seq_len=5, seed=4).data)
    with pytest.raises(ValueError):
        gen_car_images(0)
    with pytest.raises(ValueError):
        gen_car_images(3, seq_len=0)


# ---- persistence and splitting -----------------------------------------------


def json_normalized(meta: dict) -> dict:
    return json.loads(json.dumps(meta))


def test_save_load_roundtrip_real(tmp_path):
    batch = gen_four_modes(10, seed=1)
    path = tmp_path / "four.srkn"
    save_batch(batch, path)
    back = load_batch(path)
    assert torch.equal(back.data, batch.data)
    assert back.mask is None
    assert back.meta == json_normalized(batch.meta)


def test_save_load_roundtrip_image_and_mask(tmp_path):
    car = gen_car_images(3, seq_len=4, seed=0)
    mask = torch.tensor([[True] * 3, [True] * 3, [True, False, True],
                         [False, False, True]])
    batch = SequenceBatch(car.data, mask, car.meta)
    path = tmp_path / "car.srkn"
    save_batch(batch, path)
    back = load_batch(path)
    assert back.is_image
    assert torch.equal(back.data, batch.data)
    assert torch.equal(back.mask, mask)
    assert torch.equal(back.lengths(), torch.tensor([3, 2, 4]))
    assert back.meta == json_normalized(batch.meta)


def test_save_is_byte_deterministic(tmp_path):
    batch = gen_four_modes(5, seed=3)
    p1, p2 = tmp_path / "a.srkn", tmp_path / "b.srkn"
    save_batch(batch, p1)
    save_batch(batch, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert (tmp_path / "a.srkn.json").read_bytes() == (tmp_path / "b.srkn.json").read_bytes()


def test_load_rejects_garbage_and_tolerates_missing_sidecar(tmp_path):
    bad = tmp_path / "bad.srkn"
    bad.write_bytes(b"definitely not a dataset")
    with pytest.raises(ValueError, match="magic"):
        load_batch(bad)
    path = tmp_path / "ok.srkn"
    save_batch(gen_four_modes(4, seed=0), path)
    (tmp_path / "ok.srkn.json").unlink()
    assert load_batch(path).meta == {}


def test_select_subsets_data_and_aligned_meta():
    batch = gen_four_modes(8, seed=2)
    sub = batch.select([5, 1, 6])
    assert torch.equal(sub.data, batch.data[:, [5, 1, 6]])
    assert sub.meta["modes"] == [batch.meta["modes"][i] for i in (5, 1, 6)]
    assert sub.meta["kind"] == "four_modes"


def test_split_batch_partitions_the_rows():
    batch = gen_four_modes(20, seed=9)
    train, val = split_batch(batch, 6, seed=1)
    assert train.batch_size == 14 and val.batch_size == 6

    def rows(b):
        return list(map(tuple, b.data.permute(1, 0, 2).reshape(b.batch_size, -1).tolist()))

    assert sorted(rows(train) + rows(val)) == sorted(rows(batch))
    train2, val2 = split_batch(batch, 6, seed=1)
    assert torch.equal(train.data, train2.data) and torch.equal(val.data, val2.data)
    mode_of = dict(zip(rows(batch), batch.meta["modes"]))
    for b in (train, val):
        assert [mode_of[r] for r in rows(b)] == b.meta["modes"]
    with pytest.raises(ValueError):
        split_batch(batch, 20)
    with pytest.raises(ValueError):
        split_batch(batch, -1)


def test_sequence_batch_validation():
    good = torch.zeros(3, 2, 4, dtype=torch.float64)
    with pytest.raises(ValueError, match="T,B"):
        SequenceBatch(torch.zeros(3, 2))
    bad = good.clone()
    bad[0, 0, 0] = float("inf")
    with pytest.raises(ValueError, match="finite"):
        SequenceBatch(bad)
    with pytest.raises(ValueError, match="mask"):
        SequenceBatch(good, torch.ones(2, 2, dtype=torch.bool))
    with pytest.raises(ValueError, match="boolean"):
        SequenceBatch(good, torch.ones(3, 2))
    holey = torch.tensor([[True, True], [False, True], [True, True]])
    with pytest.raises(ValueError, match="prefix"):
        SequenceBatch(good, holey)


# ---- taxi corpus -------------------------------------------------------------


@pytest.fixture(scope="module")
def taxi_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("taxi") / "porto_taxi.csv"
    write_synthetic_taxi_csv(path, n=100, seed=0)
    return path


def small_taxi_config(**overrides) -> TaxiConfig:
    base = dict(train_n=60, val_n=10, test_n=30)
    base.update(overrides)
    return TaxiConfig(**base)


def test_taxi_loader_counts_and_splits(taxi_csv):
    splits = load_taxi(taxi_csv, small_taxi_config())
    assert splits.report == {"rows": 104, "malformed": 2, "too_short": 1,
                             "out_of_box": 1, "kept": 100}
    assert splits.train.data.shape == (30, 60, 2)
    assert splits.val.data.shape == (30, 10, 2)
    assert splits.test.data.shape == (30, 30, 2)
    for part in (splits.train, splits.val, splits.test):
        assert part.meta["kind"] == "taxi"
        assert part.meta["norm"] == splits.stats
    starts = [set(map(tuple, np.round(denormalize_coords(
        part.data.numpy()[0], splits.stats["mean"], splits.stats["std"]), 6)))
        for part in (splits.train, splits.val, splits.test)]
    assert not (starts[0] & starts[1]) and not (starts[0] & starts[2]) \
        and not (starts[1] & starts[2])


def test_taxi_normalization_uses_train_statistics(taxi_csv):
    splits = load_taxi(taxi_csv, small_taxi_config())
    flat = splits.train.data.numpy().reshape(-1, 2)
    assert np.abs(flat.mean(axis=0)).max() < 1e-10
    assert np.abs(flat.std(axis=0) - 1.0).max() < 1e-10
    raw = denormalize_coords(flat, splits.stats["mean"], splits.stats["std"])
    cfg = small_taxi_config()
    assert raw[:, 0].min() >= cfg.lon_min and raw[:, 0].max() <= cfg.lon_max
    assert raw[:, 1].min() >= cfg.lat_min and raw[:, 1].max() <= cfg.lat_max


def test_taxi_loader_is_deterministic(taxi_csv):
    a = load_taxi(taxi_csv, small_taxi_config())
    b = load_taxi(taxi_csv, small_taxi_config())
    for part in ("train", "val", "test"):
        assert torch.equal(getattr(a, part).data, getattr(b, part).data)
    assert a.stats == b.stats


def test_normalize_roundtrip(rng):
    arr = rng.normal(size=(7, 3, 2))
    mean, std = [1.5, -2.0], [0.25, 4.0]
    back = denormalize_coords(normalize_coords(arr, mean, std), mean, std)
    assert np.allclose(back, arr, atol=1e-12)


def test_taxi_missing_file_mentions_the_remedy(tmp_path):
    with pytest.raises(TaxiDataError) as err:
        load_taxi(tmp_path / "nope.csv")
    msg = str(err.value)
    assert "not bundled" in msg and "SRKN_DATA_DIR" in msg and "Download" in msg


def test_taxi_insufficient_rows_reports_counts(taxi_csv):
    with pytest.raises(TaxiDataError) as err:
        load_taxi(taxi_csv, small_taxi_config(train_n=200))
    msg = str(err.value)
    assert "100 usable" in msg and "malformed=2" in msg and "too_short=1" in msg


@pytest.mark.parametrize("kw", [dict(lon_min=-8.5, lon_max=-8.73),
                                dict(lat_min=41.3, lat_max=41.2),
                                dict(seq_len=0), dict(val_n=-1)])
def test_taxi_config_validation(kw):
    with pytest.raises(ValueError):
        TaxiConfig(**kw)
