import struct
import tempfile
from collections import OrderedDict
from pathlib import Path

import numpy as np
from django.core.exceptions import ValidationError
from django.test import SimpleTestCase

from core.services import tensor as T
from core.services.checkpoint import MAGIC, Checkpoint, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from core.services.model import GeneratorSpec, build_generator
from core.services.train import restore_model


def _sample_checkpoint():
    rng = np.random.default_rng(0)
    return Checkpoint(
        config=OrderedDict([("shortcut", "gated"), ("seed", "3"), ("lr_g", "0.0002")]),
        tensors=OrderedDict(
            [
                ("g.fc.weight", rng.normal(size=(4, 6)).astype(np.float32)),
                ("g.fc.bias", np.zeros(6, dtype=np.float32)),
                ("d.dense.sn.u", rng.normal(size=3)),
                ("scalar", np.array(2.5)),
            ]
        ),
    )


class CheckpointFormatTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = Path(self.tmp.name) / "ckpt_1.bin"

    def tearDown(self):
        self.tmp.cleanup()

    def test_round_trip_is_bit_exact(self):
        original = _sample_checkpoint()
        save_checkpoint(self.path, original)
        loaded = load_checkpoint(self.path)
        self.assertEqual(dict(loaded.config), dict(original.config))
        self.assertEqual(list(loaded.tensors), list(original.tensors))
        for name, arr in original.tensors.items():
            self.assertEqual(loaded.tensors[name].dtype, arr.dtype)
            self.assertEqual(loaded.tensors[name].tobytes(), arr.tobytes())
        self.assertEqual(encode_checkpoint(loaded), self.path.read_bytes())
        self.assertFalse(self.path.with_name("ckpt_1.bin.tmp").exists())

    def test_config_is_sorted_text(self):
        data = encode_checkpoint(_sample_checkpoint())
        (length,) = struct.unpack("<I", data[len(MAGIC) + 4:len(MAGIC) + 8])
        text = data[len(MAGIC) + 8:len(MAGIC) + 8 + length].decode("utf-8")
        self.assertEqual(text, "lr_g=0.0002\nseed=3\nshortcut=gated\n")

    def test_flipped_byte_fails_checksum(self):
        data = bytearray(encode_checkpoint(_sample_checkpoint()))
        data[-10] ^= 0x01
        with self.assertRaises(ValidationError) as ctx:
            decode_checkpoint(bytes(data))
        self.assertEqual(ctx.exception.code, "checksum")

    def test_truncated_header(self):
        data = encode_checkpoint(_sample_checkpoint())
        for cut in (len(MAGIC) - 2, len(MAGIC) + 6, len(MAGIC) + 20):
            with self.subTest(cut=cut), self.assertRaises(ValidationError) as ctx:
                decode_checkpoint(data[:cut])
            self.assertEqual(ctx.exception.code, "truncated")

    def test_truncated_records_fail_checksum(self):
        data = encode_checkpoint(_sample_checkpoint())
        with self.assertRaises(ValidationError) as ctx:
            decode_checkpoint(data[:-40])
        self.assertEqual(ctx.exception.code, "checksum")

    def test_first_record_follows_config(self):
        ckpt = _sample_checkpoint()
        data = encode_checkpoint(ckpt)
        (length,) = struct.unpack("<I", data[len(MAGIC) + 4:len(MAGIC) + 8])
        offset = len(MAGIC) + 8 + length
        (name_len,) = struct.unpack("<I", data[offset:offset + 4])
        self.assertEqual(name_len, len("g.fc.weight"))
        self.assertEqual(data[offset + 4:offset + 4 + name_len], b"g.fc.weight")
        self.assertEqual(data[offset + 4 + name_len:offset + 6 + name_len], bytes([0, 2]))
        self.assertEqual(struct.unpack("<2Q", data[offset + 6 + name_len:offset + 22 + name_len]), (4, 6))

    def test_any_flipped_header_byte_fails_checksum(self):
        data = encode_checkpoint(_sample_checkpoint())
        (length,) = struct.unpack("<I", data[len(MAGIC) + 4:len(MAGIC) + 8])
        offset = len(MAGIC) + 8 + length
        name_len = len("g.fc.weight")
        regions = {
            "config text": len(MAGIC) + 8,
            "name length": offset,
            "name": offset + 4,
            "dtype tag": offset + 4 + name_len,
            "rank": offset + 5 + name_len,
            "dims": offset + 6 + name_len,
        }
        for region, pos in regions.items():
            damaged = bytearray(data)
            damaged[pos] ^= 0x01
            with self.subTest(region=region), self.assertRaises(ValidationError) as ctx:
                decode_checkpoint(bytes(damaged))
            self.assertEqual(ctx.exception.code, "checksum")

    def test_version_is_checked_before_checksum(self):
        data = bytearray(encode_checkpoint(_sample_checkpoint()))
        data[len(MAGIC):len(MAGIC) + 4] = struct.pack("<I", 2)
        with self.assertRaises(ValidationError) as ctx:
            decode_checkpoint(bytes(data))
        self.assertEqual(ctx.exception.code, "version")

    def test_bad_magic(self):
        self.path.write_bytes(b"P6\n8 8\n255\n" + bytes(192))
        with self.assertRaises(ValidationError) as ctx:
            load_checkpoint(self.path)
        self.assertEqual(ctx.exception.code, "bad_magic")

    def test_failed_load_leaves_model_untouched(self):
        g = build_generator(GeneratorSpec(resolution=8, z_dim=4, width=4))
        before = {k: v.copy() for k, v in g.module.state_tensors().items()}
        ckpt = Checkpoint(tensors=OrderedDict((k, v + 1) for k, v in before.items()))
        data = bytearray(encode_checkpoint(ckpt))
        data[-5] ^= 0xFF
        self.path.write_bytes(bytes(data))
        with self.assertRaises(ValidationError):
            restore_model(load_checkpoint(self.path), g)
        for name, arr in g.module.state_tensors().items():
            np.testing.assert_array_equal(arr, before[name])

    def test_model_state_round_trip(self):
        with T.precision("float64"):
            g = build_generator(GeneratorSpec(resolution=8, z_dim=4, width=4, seed=1))
            other = build_generator(GeneratorSpec(resolution=8, z_dim=4, width=4, seed=2))
        save_checkpoint(self.path, Checkpoint(tensors=OrderedDict(g.module.state_tensors())))
        restore_model(load_checkpoint(self.path), other)
        for name, arr in g.module.state_tensors().items():
            np.testing.assert_array_equal(other.module.state_tensors()[name], arr)
