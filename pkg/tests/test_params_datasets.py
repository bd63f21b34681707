import csv

import numpy as np
import pytest

from aknet.datasets import export_csv, load_dataset, save_dataset
from aknet.hypercm import HyperParams
from aknet.kgain import GainNetParams
from aknet.params import ParamStore, load_checkpoint, param_count, save_checkpoint
from aknet.ssm import NoiseFamily, default_model, generate_batch


@pytest.fixture
def stores(rng):
    th = GainNetParams.init(2, 2, hidden=5, rng=rng, out_scale=1.0)
    psi = HyperParams.init(th.sites, width=4, rng=rng)
    psi.blocks["hyper.head.W"] = rng.standard_normal(psi["hyper.head.W"].shape)
    return th, psi


def test_checkpoint_round_trip_is_bit_exact(stores, tmp_path):
    th, psi = stores
    save_checkpoint(tmp_path / "c.bin", {"theta": th, "psi": psi})
    back = load_checkpoint(tmp_path / "c.bin")
    assert type(back["theta"]) is GainNetParams and type(back["psi"]) is HyperParams
    assert back["theta"].equal(th) and back["psi"].equal(psi)
    for k in th.names():
        assert back["theta"][k].tobytes() == th[k].tobytes()
    assert back["theta"].sites == th.sites and back["psi"].count() == psi.count()


def test_checkpoint_bytes_deterministic(stores, tmp_path):
    th, psi = stores
    save_checkpoint(tmp_path / "a.bin", {"theta": th, "psi": psi})
    save_checkpoint(tmp_path / "b.bin", {"theta": th.copy(), "psi": psi.copy()})
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_checkpoint_rejects_foreign_and_truncated(stores, tmp_path):
    (tmp_path / "x.bin").write_bytes(b"NOTACKPT" + b"\0" * 40)
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x.bin")
    save_checkpoint(tmp_path / "c.bin", {"theta": stores[0]})
    raw = (tmp_path / "c.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[:-16])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "t.bin")


def test_param_count_breakdown():
    store = ParamStore({"a": np.zeros((3, 4)), "b": np.zeros(5)})
    total, parts = param_count(store)
    assert total == 17 and parts == {"a": 12, "b": 5}


@pytest.mark.parametrize("family", [NoiseFamily.GAUSSIAN, NoiseFamily.EXPONENTIAL])
def test_dataset_round_trip(family, rng, tmp_path):
    model = default_model(2, family=family, seed=0)
    q2 = np.full((4, 6), 0.5)
    q2[:, 3:] = 2.0
    ds = generate_batch(model, q2, np.ones((4, 6)), rng, family=family, split="pseudo-stationary")
    save_dataset(tmp_path / "d.akd", ds)
    back = load_dataset(tmp_path / "d.akd")
    for name in ("x", "y", "sow", "x0", "q2", "r2", "pair"):
        assert getattr(back, name).tobytes() == getattr(ds, name).tobytes(), name
    assert back.family is family and back.split == "pseudo-stationary"


def test_dataset_trailing_bytes_and_magic(model2, rng, tmp_path):
    ds = generate_batch(model2, np.ones((2, 3)), np.ones((2, 3)), rng)
    save_dataset(tmp_path / "d.akd", ds)
    raw = (tmp_path / "d.akd").read_bytes()
    (tmp_path / "long.akd").write_bytes(raw + b"\0" * 8)
    with pytest.raises(ValueError):
        load_dataset(tmp_path / "long.akd")
    (tmp_path / "short.akd").write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        load_dataset(tmp_path / "short.akd")
    (tmp_path / "bad.akd").write_bytes(b"AKNETCK1" + raw[8:])
    with pytest.raises(ValueError):
        load_dataset(tmp_path / "bad.akd")


def test_export_csv_rows(model2, rng, tmp_path):
    ds = generate_batch(model2, np.ones((2, 3)), np.ones((2, 3)), rng)
    export_csv(tmp_path / "d.csv", ds)
    rows = list(csv.reader(open(tmp_path / "d.csv")))
    assert rows[0] == ["traj", "t", "x0", "x1", "y0", "y1", "sow"]
    assert len(rows) == 1 + 2 * 3
    assert float(rows[4][4]) == ds.y[1, 0, 0]
