"""Checkpoint container: byte layout, round trips, sharing, mismatches."""

import json
import struct

import numpy as np
import pytest

from memvos import nn
from memvos.autodiff import Parameter, Tensor
from memvos.checkpoint import (CheckpointMismatch, load_checkpoint,
                               read_header, save_checkpoint)
from memvos.engine import EngineConfig, build_engine


def small_engine(seed=0, dtype="float64"):
    cfg = EngineConfig(enc_channels=(4, 6, 8, 8), match_dim=8, id_dim=4,
                       num_heads=2, latent_tokens=4, latent_dim=8,
                       dec_channels=(8, 6, 4), ctx_stem_channels=4,
                       dtype=dtype).validate()
    return build_engine(cfg, seed=seed)


class SharedPair(nn.Module):
    """Two attribute paths to one underlying linear layer."""

    def __init__(self):
        rng = np.random.default_rng(0)
        self.first = nn.Linear(3, 3, rng)
        self.second = self.first


class TestLayout:
    def test_header_length_prefix(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(str(path), SharedPair())
        raw = path.read_bytes()
        (hlen,) = struct.unpack("<Q", raw[:8])
        header = json.loads(raw[8:8 + hlen].decode("utf-8"))
        assert set(header) == {"meta", "tensors"}
        payload = sum(e["nbytes"] for e in header["tensors"].values())
        assert len(raw) == 8 + hlen + payload

    def test_offsets_address_little_endian_payload(self, tmp_path):
        path = tmp_path / "model.ckpt"
        module = SharedPair()
        save_checkpoint(str(path), module)
        raw = path.read_bytes()
        (hlen,) = struct.unpack("<Q", raw[:8])
        header = json.loads(raw[8:8 + hlen].decode("utf-8"))
        entry = header["tensors"]["first.weight"]
        start = 8 + hlen + entry["offset"]
        arr = np.frombuffer(raw[start:start + entry["nbytes"]], dtype="<f8")
        assert np.array_equal(arr.reshape(entry["shape"]), module.first.weight.data)

    def test_meta_carries_format_marker(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(str(path), SharedPair(), meta={"note": "hi"})
        meta = read_header(str(path))["meta"]
        assert meta["note"] == "hi"
        assert "format" in meta


class TestSharing:
    def test_shared_parameter_stored_once(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(str(path), SharedPair())
        names = set(read_header(str(path))["tensors"])
        assert names == {"first.weight", "first.bias"}

    def test_load_preserves_sharing(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(str(path), SharedPair())
        target = SharedPair()
        target.first.weight.data += 1.0
        load_checkpoint(str(path), target)
        assert target.second.weight is target.first.weight
        # mutating through one path shows through the other
        target.first.weight.data[0, 0] = 123.0
        assert target.second.weight.data[0, 0] == 123.0

    def test_engine_decoder_upsamplers_stored_once(self, tmp_path):
        # the decoder reuses its upsampling stack across both decode passes;
        # the file must hold a single copy of those tensors
        eng = small_engine()
        path = tmp_path / "engine.ckpt"
        save_checkpoint(str(path), eng.model)
        names = read_header(str(path))["tensors"]
        up_names = [n for n in names if n.startswith("decoder.up.")]
        assert len(up_names) == len(set(up_names))
        stored = len(names)
        unique = len({id(p) for p in eng.model.parameters()})
        assert stored == unique


class TestRoundTrip:
    def test_bit_identical_round_trip(self, tmp_path):
        eng = small_engine(seed=3)
        path = tmp_path / "engine.ckpt"
        save_checkpoint(str(path), eng.model)
        other = small_engine(seed=4)
        load_checkpoint(str(path), other.model)
        for (na, pa), (nb, pb) in zip(eng.model.named_parameters(),
                                      other.model.named_parameters()):
            assert na == nb
            assert pa.data.dtype == pb.data.dtype
            assert np.array_equal(pa.data, pb.data), na

    def test_float32_round_trip(self, tmp_path):
        eng = small_engine(seed=5, dtype="float32")
        path = tmp_path / "engine.ckpt"
        save_checkpoint(str(path), eng.model)
        other = small_engine(seed=6, dtype="float32")
        load_checkpoint(str(path), other.model)
        for (_, pa), (_, pb) in zip(eng.model.named_parameters(),
                                    other.model.named_parameters()):
            assert pb.data.dtype == np.float32
            assert np.array_equal(pa.data, pb.data)

    def test_saved_file_is_deterministic(self, tmp_path):
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(str(a), small_engine(seed=7).model)
        save_checkpoint(str(b), small_engine(seed=7).model)
        assert a.read_bytes() == b.read_bytes()


class TestMismatches:
    def test_extent_mismatch_names_tensor(self, tmp_path):
        path = tmp_path / "model.ckpt"

        class A(nn.Module):
            def __init__(self, n):
                self.lin = nn.Linear(n, n, np.random.default_rng(0))

        save_checkpoint(str(path), A(3))
        with pytest.raises(CheckpointMismatch, match="extent mismatch for lin"):
            load_checkpoint(str(path), A(4))

    def test_name_set_mismatch(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(str(path), SharedPair())

        class B(nn.Module):
            def __init__(self):
                self.other = nn.Linear(3, 3, np.random.default_rng(0))

        with pytest.raises(CheckpointMismatch, match="names do not match"):
            load_checkpoint(str(path), B())

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(str(path), SharedPair())
        raw = path.read_bytes()
        path.write_bytes(raw[:6])
        with pytest.raises(CheckpointMismatch, match="truncated"):
            read_header(str(path))

    def test_garbage_header(self, tmp_path):
        path = tmp_path / "model.ckpt"
        path.write_bytes(struct.pack("<Q", 4) + b"bleh")
        with pytest.raises(CheckpointMismatch, match="JSON"):
            read_header(str(path))

    def test_unsupported_dtype_rejected_on_save(self, tmp_path):
        module = SharedPair()
        # bypass the tensor constructor's dtype coercion
        module.first.weight.data = np.zeros((3, 3), dtype=np.float16)
        with pytest.raises(ValueError, match="float16"):
            save_checkpoint(str(tmp_path / "bad.ckpt"), module)

    def test_loaded_parameters_stay_writable(self, tmp_path):
        # an optimizer applies updates in place after a resume
        path = tmp_path / "model.ckpt"
        save_checkpoint(str(path), SharedPair())
        target = SharedPair()
        load_checkpoint(str(path), target)
        target.first.weight.data -= 1.0
        assert target.first.weight.data.flags.writeable
