import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fmu import io
from fmu.ndtensor import ParamStore, Rng
from fmu.training import AdamState, Checkpoint, DataConfig, TrainConfig


def _ckpt(seed=0):
    rng = Rng(seed)
    ps = ParamStore(seed)
    ps.create("a.w", (3, 4))
    ps.create("a.b", (4,), init="zeros")
    ps.create("c", (2,))
    ps.set_trainable("c", False)
    adam = AdamState({"a.w": rng.normal((3, 4)).astype(np.float32)}, {"a.w": rng.uniform((3, 4)).astype(np.float32)}, 5)
    cfg = TrainConfig(epochs=2, steps_per_epoch=3)
    from fmu.training import config_hash

    return Checkpoint(ps, adam, 1, 6, cfg.to_dict(), config_hash(cfg), {"seed": 7, "stream": "phase1", "step": 6}, [0.5, 0.25], rng.uniform((4, 4, 2)).astype(np.float32))


@given(w=st.integers(1, 6), h=st.integers(1, 6), b=st.integers(1, 4), seed=st.integers(0, 10**6))
@settings(max_examples=25, deadline=None)
def test_cube_round_trip_bitwise(w, h, b, seed):
    cube = Rng(seed).normal((w, h, b)).astype(np.float32)
    blob = io.cube_bytes(cube)
    back = io.cube_from_bytes(blob)
    assert back.tobytes() == cube.tobytes()
    assert io.cube_bytes(back) == blob


def test_cube_layout_is_little_endian_band_fastest():
    cube = np.arange(8, dtype=np.float32).reshape(2, 2, 2)
    blob = io.cube_bytes(cube)
    assert blob[:4] == b"HSC1"
    (n,) = struct.unpack("<I", blob[4:8])
    payload = blob[8 + n :]
    assert struct.unpack("<8f", payload) == tuple(range(8))


def test_cube_file_round_trip(tmp_path):
    cube = Rng(1).uniform((5, 4, 3)).astype(np.float32)
    io.save_cube(tmp_path / "c.hsc", cube)
    assert io.load_cube(tmp_path / "c.hsc").tobytes() == cube.tobytes()


@pytest.mark.parametrize(
    "corrupt, code",
    [
        (lambda b: b[:-1], "truncated_payload"),
        (lambda b: b + b"\0", "trailing_bytes"),
        (lambda b: b"XXXX" + b[4:], "bad_magic"),
        (lambda b: b[:6], "bad_header"),
        (lambda b: b[:8] + b"!" + b[9:], "bad_header"),
    ],
)
def test_cube_corruption_codes(corrupt, code):
    blob = io.cube_bytes(np.zeros((2, 3, 4), dtype=np.float32))
    with pytest.raises(io.FormatError) as exc:
        io.cube_from_bytes(corrupt(blob))
    assert exc.value.code == code


def test_checkpoint_round_trip_bitwise():
    ck = _ckpt()
    blob = io.ckpt_bytes(ck)
    back = io.ckpt_from_bytes(blob)
    assert io.ckpt_bytes(back) == blob
    assert back.params.names() == ck.params.names()
    for n in ck.params:
        assert back.params[n].data.tobytes() == ck.params[n].data.tobytes()
        assert back.params.entry(n).trainable == ck.params.entry(n).trainable
    assert back.adam.t == 5 and back.adam.m["a.w"].tobytes() == ck.adam.m["a.w"].tobytes()
    assert back.step == 6 and back.epoch == 2 and back.losses == [0.5, 0.25]
    assert back.config_hash == ck.config_hash and back.rng_state == ck.rng_state
    np.testing.assert_array_equal(back.mask, ck.mask)


def _manifest(blob):
    (n,) = struct.unpack("<I", blob[4:8])
    import json

    return json.loads(blob[8 : 8 + n]), blob[8 + n :]


def _repack(header, payload):
    import json

    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return b"FMU1" + struct.pack("<I", len(head)) + head + payload


def test_checkpoint_offsets_partition_payload():
    header, payload = _manifest(io.ckpt_bytes(_ckpt()))
    cursor = 0
    for e in header["entries"]:
        assert e["offset"] == cursor
        cursor += e["nbytes"]
    assert cursor == len(payload) == header["payload_bytes"]


def test_checkpoint_corruption_codes():
    blob = io.ckpt_bytes(_ckpt())
    header, payload = _manifest(blob)
    with pytest.raises(io.FormatError) as exc:
        io.ckpt_from_bytes(blob[:-1])
    assert exc.value.code == "truncated_payload"
    with pytest.raises(io.FormatError) as exc:
        io.ckpt_from_bytes(b"HSC1" + blob[4:])
    assert exc.value.code == "bad_magic"

    bad = dict(header, entries=[dict(e) for e in header["entries"]])
    bad["entries"][1]["offset"] += 4
    with pytest.raises(io.FormatError) as exc:
        io.ckpt_from_bytes(_repack(bad, payload))
    assert exc.value.code == "offset_mismatch"

    bad = dict(header, entries=[dict(e) for e in header["entries"]])
    bad["entries"][0]["shape"] = [5, 4]
    with pytest.raises(io.FormatError) as exc:
        io.ckpt_from_bytes(_repack(bad, payload))
    assert exc.value.code == "shape_mismatch"


def test_verify_mode_checkpoints_are_64bit(f64):
    ps = ParamStore(0)
    ps.create("w", (3,))
    ck = Checkpoint(ps, AdamState(), 1, 0, {}, "h", {}, [])
    header, payload = _manifest(io.ckpt_bytes(ck))
    assert header["dtype"] == "f64le" and len(payload) == 24
    back = io.ckpt_from_bytes(io.ckpt_bytes(ck))
    assert back.params["w"].data.tobytes() == ps["w"].data.tobytes()


# --- config -----------------------------------------------------------------------


def test_config_sections_and_types():
    cfg = io.config_from_text(
        """
[train]
epochs = 3
lr_start = 1e-3
finetune_unfolding = false
[data]
n_train = 4
smoothness = 0.5
[sensing]
mode = cassi
shift = 1
[model]
encoder_padding = circular
[unfolding]
stages = 2
prior = none
"""
    )
    assert cfg.epochs == 3 and cfg.lr_start == 1e-3 and cfg.finetune_unfolding is False
    assert cfg.data == DataConfig(n_train=4, smoothness=0.5)
    assert cfg.sensing.mode == "cassi" and cfg.sensing.shift == 1
    assert cfg.model.encoder_padding == "circular"
    assert cfg.unfolding.stages == 2 and cfg.unfolding.prior == "none"


def test_empty_config_is_default():
    assert io.config_from_text("") == TrainConfig()


@pytest.mark.parametrize(
    "text",
    ["[train]\nepoch = 3\n", "[scene]\nrank = 2\n", "[data]\nn_train = many\n", "[train]\nfinetune_unfolding = maybe\n", "epochs = 3\n"],
)
def test_config_strict(text):
    with pytest.raises(io.ConfigError):
        io.config_from_text(text)


def test_load_config_file(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[train]\nseed = 9\n")
    assert io.load_config(p).seed == 9
