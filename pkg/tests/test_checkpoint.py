import json

import numpy as np
import pytest

from hiest.checkpoint import load_checkpoint, save_checkpoint
from hiest.checks import toy_config, toy_graph
from hiest.graph import build_hierarchy
from hiest.model import Hiest


def test_bit_exact_roundtrip(tmp_path):
    cfg = toy_config(eta4=0.3, ag_refresh="epoch")
    model = Hiest(cfg, build_hierarchy(toy_graph()), seed=5)
    arrays = model.state_arrays()
    arrays["layer0.gcn"][0, 0] = np.nextafter(1.0, 2.0)
    optim = {"m.layer0.gcn": np.full((3, 3), 1e-300), "t": np.array([7.0])}
    save_checkpoint(tmp_path / "c.ckpt", cfg, arrays, {"norm_mean": [55.0], "epoch": 3}, optim)
    cfg2, arrays2, extra, optim2 = load_checkpoint(tmp_path / "c.ckpt")
    assert cfg2 == cfg
    assert arrays2.keys() == arrays.keys()
    for k in arrays:
        assert arrays2[k].dtype == np.float64 and arrays2[k].tobytes() == arrays[k].tobytes()
    assert extra == {"norm_mean": [55.0], "epoch": 3}
    assert optim2.keys() == optim.keys() and all(np.array_equal(optim[k], optim2[k]) for k in optim)


def test_parameter_names_are_stable(tmp_path):
    model = Hiest(toy_config(), build_hierarchy(toy_graph()))
    save_checkpoint(tmp_path / "c.ckpt", model.config, model.state_arrays())
    with np.load(tmp_path / "c.ckpt") as z:
        names = set(z.files)
        header = json.loads(bytes(z["__header__"]).decode())
    assert {"input.weight", "layer0.tcn_filter", "layer1.gcn", "mapping.theta", "output.bias"} <= names
    assert header["format"] == "hiest-checkpoint" and header["version"] == 1
    assert header["config"]["hidden"] == 3


def test_loaded_model_predicts_identically(tmp_path):
    hier = build_hierarchy(toy_graph())
    a = Hiest(toy_config(), hier, seed=1)
    save_checkpoint(tmp_path / "c.ckpt", a.config, a.state_arrays())
    cfg, arrays, _, _ = load_checkpoint(tmp_path / "c.ckpt")
    b = Hiest(cfg, hier, seed=99)
    b.load_arrays(arrays)
    x = np.random.default_rng(0).normal(size=(2, 3, 6, 1))
    assert np.array_equal(a.forward(x).data, b.forward(x).data)


def test_rejects_foreign_files(tmp_path):
    np.savez(tmp_path / "x.npz", a=np.ones(2))
    with pytest.raises(ValueError, match="not a checkpoint"):
        load_checkpoint(tmp_path / "x.npz")
