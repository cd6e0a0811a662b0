import pytest
import torch

from skinssl.checkpoint import (
    checkpoint_bytes,
    load_checkpoint,
    load_optimizer_state,
    optimizer_state,
    prefixed,
    restore_module,
    save_checkpoint,
    tensor_hash,
)
from skinssl.errors import MissingFileError, ResumeError


@pytest.fixture
def tensors():
    return {
        "encoder.weight": torch.randn(4, 3),
        "encoder.bias": torch.arange(4, dtype=torch.float64),
        "center": torch.full((7,), 0.25),
        "step": torch.tensor(12),
        "mask": torch.tensor([True, False, True]),
    }


def test_round_trip(tmp_path, tensors):
    config = {"objective": "distill", "seed": 3}
    path = save_checkpoint(tmp_path / "run" / "model.ckpt", tensors, config)
    loaded_config, loaded = load_checkpoint(path)
    assert loaded_config == config
    assert set(loaded) == set(tensors)
    for name, value in tensors.items():
        assert loaded[name].dtype == value.dtype
        assert torch.equal(loaded[name], value)
    assert tensor_hash(loaded) == tensor_hash(tensors)


def test_corrupt_tensor_is_named(tmp_path, tensors):
    data = bytearray(checkpoint_bytes(tensors, {}))
    at = bytes(data).find(tensors["center"].numpy().tobytes())
    data[at + 5] ^= 0x01
    path = tmp_path / "bad.ckpt"
    path.write_bytes(bytes(data))
    with pytest.raises(ResumeError) as info:
        load_checkpoint(path)
    assert info.value.tensor == "center"
    assert "center" in str(info.value)


def test_truncated(tmp_path, tensors):
    path = tmp_path / "short.ckpt"
    path.write_bytes(checkpoint_bytes(tensors, {})[:-40])
    with pytest.raises(ResumeError):
        load_checkpoint(path)


def test_missing(tmp_path):
    with pytest.raises(MissingFileError):
        load_checkpoint(tmp_path / "none.ckpt")


def test_no_temp_files_left(tmp_path, tensors):
    save_checkpoint(tmp_path / "a.ckpt", tensors, {})
    assert [p.name for p in tmp_path.iterdir()] == ["a.ckpt"]


def test_restore_module(tmp_path):
    source, target = torch.nn.Linear(3, 2), torch.nn.Linear(3, 2)
    path = save_checkpoint(tmp_path / "m.ckpt", prefixed("head", source.state_dict()), {})
    _, loaded = load_checkpoint(path)
    restore_module(target, "head", loaded)
    assert tensor_hash(target) == tensor_hash(source)
    with pytest.raises(ResumeError) as info:
        restore_module(torch.nn.Linear(3, 5), "head", loaded)
    assert info.value.tensor.startswith("head.")


def test_optimizer_state_round_trip(tmp_path):
    model = torch.nn.Linear(3, 1)
    optimizer = torch.optim.AdamW(model.parameters(), lr=1e-2)
    model(torch.randn(5, 3)).sum().backward()
    optimizer.step()
    meta, tensors = optimizer_state(optimizer)
    path = save_checkpoint(tmp_path / "o.ckpt", tensors, {"optim": meta})
    config, loaded = load_checkpoint(path)

    fresh = torch.optim.AdamW(model.parameters(), lr=1e-2)
    load_optimizer_state(fresh, config["optim"], loaded)
    for key in ("exp_avg", "exp_avg_sq"):
        assert torch.equal(fresh.state_dict()["state"][0][key],
                           optimizer.state_dict()["state"][0][key])
