import tempfile
import unittest
from pathlib import Path

import numpy as np

from checkpoint import MANIFEST_NAME, load_checkpoint, read_manifest, save_checkpoint
from errors import CheckpointError, ParseError
from mini_psp import MiniPSP
from synth_data import ChannelStats
from test_utils.decorators import number
from tests.fixtures import random_batch, tiny_network


class TestCheckpoint(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name) / "ckpt"

    def tearDown(self):
        self.tmp.cleanup()

    @number("2.60")
    def test_round_trip(self):
        stats = ChannelStats((0.1, 0.2, 0.3), (0.5, 0.25, 0.125))
        for injection in ("none", "before-pool", "after-final"):
            net = MiniPSP(tiny_network(injection, seed=4), normalization=stats)
            save_checkpoint(net, self.dir / injection)
            loaded = load_checkpoint(self.dir / injection)
            self.assertEqual(loaded.cfg, net.cfg)
            self.assertEqual(loaded.normalization, stats)
            for path, params in net.named_parameters():
                np.testing.assert_array_equal(loaded.params[path].weights.values, params.weights.values)
                np.testing.assert_array_equal(loaded.params[path].bias, params.bias)
                self.assertEqual(loaded.params[path].stride, params.stride)
            image, coarse, _ = random_batch(0, dtype=np.float32)
            c = None if injection == "none" else coarse
            np.testing.assert_array_equal(loaded.predict(image, c), net.predict(image, c))

    @number("2.61")
    def test_manifest_lines(self):
        save_checkpoint(MiniPSP(tiny_network("after-pool")), self.dir)
        items = read_manifest(self.dir)
        self.assertEqual(items["injection"], "after-pool")
        self.assertEqual(items["encoder_channels"], "4,4")
        self.assertTrue((self.dir / "embed.weight.bin").exists())
        self.assertEqual((self.dir / "classifier.bias.bin").stat().st_size, 3 * 4)

    @number("2.62")
    def test_missing_manifest(self):
        with self.assertRaises(CheckpointError):
            load_checkpoint(self.dir)

    @number("2.63")
    def test_truncated_blob(self):
        save_checkpoint(MiniPSP(tiny_network()), self.dir)
        blob = self.dir / "final.weight.bin"
        blob.write_bytes(blob.read_bytes()[:-4])
        with self.assertRaises(ParseError) as ctx:
            load_checkpoint(self.dir)
        self.assertIn("final.weight.bin", str(ctx.exception))

    @number("2.64")
    def test_malformed_manifest(self):
        save_checkpoint(MiniPSP(tiny_network()), self.dir)
        manifest = self.dir / MANIFEST_NAME
        manifest.write_text(manifest.read_text() + "garbage line\n")
        with self.assertRaises(ParseError):
            load_checkpoint(self.dir)

    @number("2.65")
    def test_layer_list_mismatch(self):
        save_checkpoint(MiniPSP(tiny_network()), self.dir)
        manifest = self.dir / MANIFEST_NAME
        manifest.write_text(manifest.read_text().replace("injection = none", "injection = after-final"))
        with self.assertRaises(CheckpointError):
            load_checkpoint(self.dir)

    @number("2.66")
    def test_malformed_values(self):
        save_checkpoint(MiniPSP(tiny_network()), self.dir)
        manifest = self.dir / MANIFEST_NAME
        original = manifest.read_text()
        for key, bad in (("embed_width", "abc"), ("encoder_channels", "4,x"), ("ppm_channels", "2,2")):
            lines = [f"{key} = {bad}" if line.startswith(f"{key} =") else line for line in original.splitlines()]
            text = "\n".join(lines) + "\n"
            manifest.write_text(text)
            with self.subTest(key=key):
                with self.assertRaises(ParseError) as ctx:
                    load_checkpoint(self.dir)
                self.assertEqual(ctx.exception.offset, text.index(f"{key} ="))
                self.assertIn(key, str(ctx.exception))


if __name__ == "__main__":
    unittest.main()
