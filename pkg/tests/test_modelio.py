"""BNNM model files: round trips and corruption handling."""

import struct

import numpy as np
import pytest

from bnnkit.modelio import (BadMagicError, SpecMismatchError,
                            TruncatedFileError, VersionMismatchError,
                            canonical_spec_json, load_model, save_model,
                            spec_from_dict, spec_to_dict)
from bnnkit.nets import build, models_equal, table1_spec
from helpers import make_random_model


@pytest.fixture
def small_model():
    return make_random_model(np.random.default_rng(0))


class TestRoundTrip:
    def test_small_model_bit_exact(self, small_model, tmp_path):
        path = tmp_path / "m.bnnm"
        save_model(small_model, path)
        assert models_equal(load_model(path), small_model)

    def test_many_random_models(self, tmp_path):
        rng = np.random.default_rng(1)
        for i in range(20):
            model = make_random_model(rng)
            path = tmp_path / f"m{i}.bnnm"
            save_model(model, path)
            assert models_equal(load_model(path), model)

    def test_resave_identical_bytes(self, small_model, tmp_path):
        p1, p2 = tmp_path / "a.bnnm", tmp_path / "b.bnnm"
        save_model(small_model, p1)
        save_model(load_model(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_spec_json_round_trip(self):
        spec = table1_spec(32, 10, 1 / 16)
        import json
        assert spec_from_dict(json.loads(canonical_spec_json(spec))) == spec

    def test_canonical_json_sorted_compact(self, small_model):
        blob = canonical_spec_json(small_model.spec)
        assert b" " not in blob
        d = spec_to_dict(small_model.spec)
        import json
        assert blob == json.dumps(d, sort_keys=True,
                                  separators=(",", ":")).encode()


class TestCorruption:
    def test_bad_magic(self, small_model, tmp_path):
        path = tmp_path / "m.bnnm"
        save_model(small_model, path)
        data = bytearray(path.read_bytes())
        data[:4] = b"JUNK"
        path.write_bytes(bytes(data))
        with pytest.raises(BadMagicError):
            load_model(path)

    def test_version_mismatch(self, small_model, tmp_path):
        path = tmp_path / "m.bnnm"
        save_model(small_model, path)
        data = bytearray(path.read_bytes())
        data[4:8] = struct.pack("<I", 99)
        path.write_bytes(bytes(data))
        with pytest.raises(VersionMismatchError):
            load_model(path)

    def test_truncated_file(self, small_model, tmp_path):
        path = tmp_path / "m.bnnm"
        save_model(small_model, path)
        data = path.read_bytes()
        path.write_bytes(data[:len(data) - 7])
        with pytest.raises(TruncatedFileError):
            load_model(path)

    def test_spec_tensor_mismatch(self, tmp_path):
        # header/spec of a 10-class net, tensors from a 12-class net
        from bnnkit.modelio import MAGIC, VERSION, _iter_named_tensors, \
            write_tensor_record
        spec10 = table1_spec(32, 10, 1 / 16)
        model12 = build(table1_spec(32, 12, 1 / 16), np.random.default_rng(0))
        path = tmp_path / "m.bnnm"
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", VERSION))
            blob = canonical_spec_json(spec10)
            f.write(struct.pack("<Q", len(blob)))
            f.write(blob)
            for name, arr in _iter_named_tensors(model12):
                write_tensor_record(f, name, arr)
        with pytest.raises(SpecMismatchError):
            load_model(path)

    def test_invalid_spec_blob(self, small_model, tmp_path):
        path = tmp_path / "m.bnnm"
        with open(path, "wb") as f:
            from bnnkit.modelio import MAGIC, VERSION
            f.write(MAGIC)
            f.write(struct.pack("<I", VERSION))
            blob = b'{"not": "a spec"}'
            f.write(struct.pack("<Q", len(blob)))
            f.write(blob)
        with pytest.raises(SpecMismatchError):
            load_model(path)

    def test_errors_are_distinct_types(self):
        kinds = {BadMagicError, VersionMismatchError, TruncatedFileError,
                 SpecMismatchError}
        assert len(kinds) == 4
