import json
import struct

import numpy as np
import pytest

from tsfo.data import synth_generate
from tsfo.errors import ParseError
from tsfo.model import ModelConfig, build_model, forward_batch
from tsfo.pruning import PruneSpec, prune_unstructured
from tsfo.quantization import calibrate, quantize_static, quantized_forward_batch
from tsfo.serialize import (
    MAGIC,
    load,
    read_container,
    save_dataset,
    save_model,
    save_quantized,
)
from tsfo.tensor import seeded_rng


def small_config():
    return ModelConfig(
        num_layers=2, num_heads=2, model_dim=8, ffn_dim=16, patch_size=4,
        patch_stride=4, seq_len=16, in_channels=1, num_classes=3, dropout=0.1,
    )


class TestModelRoundTrip:
    def test_bit_exact(self, tmp_path):
        m = build_model(small_config(), 0)
        path = tmp_path / "m.tsfo"
        save_model(m, path)
        back = load(path)
        assert back.config == m.config
        assert set(back.params) == set(m.params)
        for name in m.params:
            assert np.array_equal(back.params[name], m.params[name])
            assert back.params[name].dtype == np.float32

    def test_masks_survive(self, tmp_path):
        m = build_model(small_config(), 1)
        m, masks, _ = prune_unstructured(m, PruneSpec("l1", "weight", "global", 0.5))
        path = tmp_path / "m.tsfo"
        save_model(m, path)
        back = load(path)
        assert set(back.masks) == set(masks)
        for name in masks:
            assert np.array_equal(back.masks[name], masks[name])

    def test_structured_config_survives(self, tmp_path):
        from tsfo.pruning import prune_structured

        m = build_model(small_config(), 2)
        pruned, _ = prune_structured(m, PruneSpec("l2", "neuron", "layerwise", 0.5))
        path = tmp_path / "p.tsfo"
        save_model(pruned, path)
        back = load(path)
        assert back.config.ffn_per_layer == pruned.config.ffn_per_layer
        xs = seeded_rng(3).normal(size=(2, 1, 16)).astype(np.float32)
        assert np.array_equal(forward_batch(back, xs), forward_batch(pruned, xs))


class TestQuantizedRoundTrip:
    def test_static_model_identical_inference(self, tmp_path):
        m = build_model(small_config(), 4)
        xs = seeded_rng(5).normal(size=(6, 1, 16)).astype(np.float32)
        qm = quantize_static(m, calibrate(m, xs))
        path = tmp_path / "q.tsfo"
        save_quantized(qm, path)
        back = load(path)
        assert back.mode == "static"
        assert back.act_qparams == qm.act_qparams
        assert np.array_equal(
            quantized_forward_batch(back, xs), quantized_forward_batch(qm, xs)
        )

    def test_scales_preserved_exactly(self, tmp_path):
        from tsfo.quantization import quantize_dynamic

        m = build_model(small_config(), 6)
        qm = quantize_dynamic(m)
        path = tmp_path / "q.tsfo"
        save_quantized(qm, path)
        back = load(path)
        for name, q in qm.weights.items():
            assert np.array_equal(back.weights[name].data, q.data)
            assert np.array_equal(
                np.asarray(back.weights[name].scale), np.asarray(q.scale)
            )
            assert back.weights[name].zero_point == q.zero_point


class TestDatasetRoundTrip:
    def test_lossless(self, tmp_path):
        ds = synth_generate(3, 7, 48, 0.2, seed=11)
        path = tmp_path / "ds.tsfo"
        save_dataset(ds, path)
        back = load(path)
        assert np.array_equal(back.instances, ds.instances)
        assert np.array_equal(back.labels, ds.labels)
        assert back.subjects.tolist() == ds.subjects.tolist()
        assert back.name == ds.name


class TestContainerFormat:
    def test_magic_and_layout(self, tmp_path):
        m = build_model(small_config(), 7)
        path = tmp_path / "m.tsfo"
        save_model(m, path)
        raw = path.read_bytes()
        assert raw[:4] == MAGIC
        version, header_len = struct.unpack("<IQ", raw[4:16])
        assert version == 1
        header = json.loads(raw[16 : 16 + header_len])
        assert header["kind"] == "model"
        payload = raw[16 + header_len :]
        expected = sum(
            int(np.prod(e["shape"])) * (4 if e["dtype"] == "f32" else 1)
            for e in header["tensors"]
        )
        assert len(payload) == expected

    def test_payload_little_endian(self, tmp_path):
        m = build_model(small_config(), 8)
        path = tmp_path / "m.tsfo"
        save_model(m, path)
        _, _, tensors = read_container(path)
        name = "patch_embed.weight"
        arr, _ = tensors[name]
        raw = m.params[name].astype("<f4").tobytes()
        assert arr.astype("<f4").tobytes() == raw

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(ParseError):
            read_container(path)

    def test_truncated_payload_rejected(self, tmp_path):
        m = build_model(small_config(), 9)
        path = tmp_path / "m.tsfo"
        save_model(m, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with pytest.raises(ParseError):
            read_container(path)
