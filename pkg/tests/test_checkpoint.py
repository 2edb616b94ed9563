import io
import os
import tempfile
import unittest

import numpy as np

from modepinn.checkpoint import (
    ensure_architecture,
    load_checkpoint,
    load_checkpoint_file,
    save_checkpoint,
    save_checkpoint_file,
)
from modepinn.constants import AdapterKind
from modepinn.errors import DimensionError
from modepinn.model import ArchitectureConfig, attach_adapters, build_p2inn, predict

SMALL = ArchitectureConfig(coord_widths=(8,), param_widths=(8,), decoder_widths=(10, 10))


def _dump(model, run_config=None) -> bytes:
    stream = io.BytesIO()
    save_checkpoint(model, stream, run_config)
    return stream.getvalue()


class TestCheckpoint(unittest.TestCase):
    def setUp(self):
        self.model = build_p2inn(SMALL, 5)
        rng = np.random.default_rng(0)
        self.coords = np.stack([rng.uniform(0, 6, 50), rng.uniform(0, 1, 50)], axis=1)
        self.mu = np.array([3.0, 0.0, 1.0])

    def test_round_trip_is_bit_exact(self):
        data = _dump(self.model, {"run_id": "a"})
        restored, header = load_checkpoint(io.BytesIO(data))
        self.assertEqual(header["run_config"], {"run_id": "a"})
        self.assertEqual(header["seed"], 5)
        self.assertEqual(restored.config, SMALL)
        for (name, a), (_, b) in zip(restored.named_layers(), self.model.named_layers()):
            self.assertEqual(a.weight.tobytes(), b.weight.tobytes(), name)
            self.assertEqual(a.bias.tobytes(), b.bias.tobytes(), name)
        self.assertEqual(_dump(restored, {"run_id": "a"}), data)

    def test_adapters_survive(self):
        for kind in (AdapterKind.MODE, AdapterKind.LORA, AdapterKind.IA3, AdapterKind.FULL):
            adapted = attach_adapters(self.model, kind, 2, frozen_fields=("tau",) if kind == AdapterKind.MODE else ())
            moved = {
                name: value + 0.1 for name, value in adapted.trainable_parameters().items()
            }
            adapted.set_trainables(moved)
            restored, header = load_checkpoint(io.BytesIO(_dump(adapted)))
            self.assertEqual(restored.adapter_kind, kind)
            self.assertEqual(header["adapter_kind"], kind.value)
            self.assertEqual(
                predict(restored, self.coords, self.mu).tobytes(),
                predict(adapted, self.coords, self.mu).tobytes(),
                kind.value,
            )
            self.assertEqual(
                sorted(restored.trainable_parameters()), sorted(adapted.trainable_parameters())
            )
            self.assertTrue(all(layer.frozen for _, layer in restored.named_layers()))

    def test_bad_magic(self):
        with self.assertRaises(ValueError):
            load_checkpoint(io.BytesIO(b"NOTACKPT" + _dump(self.model)[8:]))

    def test_truncated_file(self):
        data = _dump(attach_adapters(self.model, AdapterKind.MODE, 2))
        for cut in (4, 20, len(data) - 3):
            with self.assertRaises(EOFError, msg=cut):
                load_checkpoint(io.BytesIO(data[:cut]))

    def test_files(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "checkpoint.bin")
            save_checkpoint_file(self.model, path)
            restored, _ = load_checkpoint_file(path)
        ensure_architecture(restored, SMALL)
        with self.assertRaises(DimensionError):
            ensure_architecture(restored, ArchitectureConfig.desk())


if __name__ == "__main__":
    unittest.main()
