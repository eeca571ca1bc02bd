#!/usr/bin/env python3
"""
Pruebas de las arquitecturas IMDN: conteo de parámetros, formas, bloques y fichero de pesos
"""

import sys
import os
import struct
sys.path.insert(0, os.path.join(os.path.dirname(__file__), 'src'))

import numpy as np
import pytest

import autograd as ag
from errors import DivisibilityError, ShapeError, VariantError, WeightFileError
from imdn_model import (
    WEIGHT_MAGIC, build_ablation, build_imdn_as, build_model, build_variant, forward_cca, forward_imdb,
    forward_prm, init_weights, load_weights, save_weights,
)
from models import Variant, config_for_variant, parse_variant
from tensor_core import conv2d


def tiny_config(**overrides):
    values = dict(num_blocks=2, channels=8, distilled=2, coarse=6, cca_squeeze=2)
    values.update(overrides)
    return values


@pytest.mark.parametrize("variant,scale,expected", [
    ("imdn", 4, 715_176),
    ("imdn", 3, 703_059),
    ("imdn", 2, 694_404),
    ("basic-B4", 4, 480_176),
    ("basic-B4+CCA", 4, 482_496),
    ("basic-B4+CA", 4, 482_496),
    ("B4", 4, 498_944),
    ("plain-3conv-B4", 4, 509_552),
    ("imdn-as", 4, 752_104),
])
def test_parameter_counts(variant, scale, expected):
    assert build_variant(variant, scale=scale).parameter_count() == expected


def test_single_block_parameters():
    model = build_variant(Variant.IMDN)
    block = sum(layer.param_count for name, layer in model.layers.items() if name.startswith("blocks.0."))
    cca = sum(model.layers[f"blocks.0.{n}"].param_count for n in ("cca_down", "cca_up"))
    assert block == 104_020
    assert cca == 580


def test_imdn_forward_shape():
    model = init_weights(build_variant(Variant.IMDN, scale=4), seed=0)
    out = model.forward(np.random.default_rng(0).random((1, 3, 24, 24)))
    assert out.shape == (1, 3, 96, 96)
    assert np.all(np.isfinite(out))


@pytest.mark.parametrize("side", [64, 52])
def test_imdn_as_keeps_size(side):
    model = init_weights(build_imdn_as(config_for_variant(Variant.IMDN_AS, **tiny_config())), seed=0)
    out = model.forward(np.random.default_rng(1).random((1, 3, side, side)))
    assert out.shape == (1, 3, side, side)


def test_imdn_as_rejects_non_divisible_input():
    model = build_variant(Variant.IMDN_AS)
    with pytest.raises(DivisibilityError):
        model.forward(np.zeros((1, 3, 50, 50)))


def test_forward_rejects_wrong_channels():
    model = build_variant(Variant.IMDN, scale=2, **tiny_config())
    with pytest.raises(ShapeError):
        model.forward(np.zeros((1, 1, 8, 8)))


def test_prm_with_zero_weights_is_zero():
    model = build_variant(Variant.IMDN)
    x = np.random.default_rng(2).standard_normal((1, 64, 6, 6))
    out = forward_prm(model, 0, x)
    assert out.shape == (1, 64, 6, 6)
    np.testing.assert_array_equal(out.value, 0.0)


def test_prm_last_conv_owns_last_channels():
    """c4 a cero anula exactamente los canales 48..63"""
    model = init_weights(build_variant(Variant.IMDN), seed=3)
    model.set_parameters({
        "blocks.0.c4.weight": np.zeros_like(model.layers["blocks.0.c4"].weights),
        "blocks.0.c4.bias": np.zeros(16),
    })
    out = forward_prm(model, 0, np.random.default_rng(3).standard_normal((1, 64, 6, 6))).value
    np.testing.assert_array_equal(out[:, 48:], 0.0)
    assert np.any(out[:, :48] != 0.0)


def test_cca_of_zero_is_zero():
    model = init_weights(build_variant(Variant.IMDN), seed=4)
    out = forward_cca(model, 0, np.zeros((1, 64, 5, 5)))
    np.testing.assert_array_equal(out.value, 0.0)


def test_cca_with_constant_gates():
    model = init_weights(build_variant(Variant.IMDN), seed=5)
    bias = np.linspace(-2.0, 2.0, 64)
    model.set_parameters({
        "blocks.1.cca_up.weight": np.zeros((64, 4, 1, 1)),
        "blocks.1.cca_up.bias": bias,
    })
    x = np.random.default_rng(5).standard_normal((2, 64, 4, 4))
    out = forward_cca(model, 1, x).value
    expected = x / (1.0 + np.exp(-bias))[None, :, None, None]
    np.testing.assert_allclose(out, expected, rtol=1e-12)


def test_imdb_with_zero_weights_is_identity():
    model = build_variant(Variant.IMDN)
    x = np.random.default_rng(6).standard_normal((1, 64, 5, 5))
    out = forward_imdb(model, 2, x)
    np.testing.assert_array_equal(out.value, x)


def test_block_index_out_of_range():
    model = build_variant(Variant.IMDN)
    with pytest.raises(ShapeError):
        forward_imdb(model, 6, np.zeros((1, 64, 3, 3)))


def test_init_is_deterministic():
    first = init_weights(build_variant(Variant.IMDN, scale=2, **tiny_config()), seed=7)
    second = init_weights(build_variant(Variant.IMDN, scale=2, **tiny_config()), seed=7)
    other = init_weights(build_variant(Variant.IMDN, scale=2, **tiny_config()), seed=8)
    for name, value in first.parameter_arrays().items():
        np.testing.assert_array_equal(value, second.parameter_arrays()[name])
    assert any(
        not np.array_equal(value, other.parameter_arrays()[name])
        for name, value in first.parameter_arrays().items()
    )
    assert all(np.all(layer.bias == 0) for layer in first.layers.values())


def test_init_keeps_activations_in_range():
    model = init_weights(build_variant(Variant.IMDN, scale=2), seed=0)
    out = model.forward(np.random.default_rng(0).random((1, 3, 16, 16)))
    assert 0.05 < float(out.std()) < 20.0


def test_plain_variant_has_no_fusion_conv():
    model = build_ablation("plain-3conv-B4")
    assert "blocks.0.c5" not in model.layers
    assert "blocks.0.c3" in model.layers
    assert "fusion_1x1" not in model.layers


def test_ablation_rejects_full_variants():
    with pytest.raises(VariantError):
        build_ablation(Variant.IMDN)
    with pytest.raises(VariantError):
        parse_variant("imdn-xl")


def test_set_parameters_validates_names_and_shapes():
    model = build_variant(Variant.IMDN, scale=2, **tiny_config())
    with pytest.raises(ShapeError):
        model.set_parameters({"nope.weight": np.zeros(1)})
    with pytest.raises(ShapeError):
        model.set_parameters({"fea_conv.bias": np.zeros(3)})


def test_forward_nodes_matches_forward():
    model = init_weights(build_variant(Variant.IMDN, scale=2, **tiny_config()), seed=9)
    x = np.random.default_rng(9).random((1, 3, 6, 6))
    nodes = model.forward_nodes(ag.constant(x), model.parameter_nodes())
    np.testing.assert_array_equal(nodes.value, model.forward(x))


# ===== FICHERO DE PESOS =====

@pytest.mark.parametrize("variant,scale", [("imdn", 3), ("imdn-as", 4), ("basic-B4+CA", 2), ("plain-3conv-B4", 4)])
def test_weights_roundtrip_is_bit_exact(tmp_path, variant, scale):
    model = init_weights(build_variant(variant, scale=scale, **tiny_config(num_blocks=2)), seed=10)
    first = save_weights(model, tmp_path / "a.imdnw")
    loaded = load_weights(first)
    second = save_weights(loaded, tmp_path / "b.imdnw")

    assert first.read_bytes() == second.read_bytes()
    assert loaded.config == model.config
    x = np.random.default_rng(10).random((1, 3, 8, 8))
    np.testing.assert_array_equal(loaded.forward(x), model.forward(x))


def test_truncated_weights_are_rejected(tmp_path):
    model = build_variant(Variant.IMDN, scale=2, **tiny_config())
    path = save_weights(model, tmp_path / "w.imdnw")
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(WeightFileError):
        load_weights(path)


def test_bad_magic_is_rejected(tmp_path):
    path = tmp_path / "w.imdnw"
    path.write_bytes(b"NOTIMDN" + bytes(64))
    with pytest.raises(WeightFileError):
        load_weights(path)


@pytest.mark.parametrize("field, value", [
    ("channels", 2 ** 20),
    ("num_blocks", 2 ** 31),
])
def test_corrupt_header_is_rejected_before_building(tmp_path, field, value):
    model = build_variant(Variant.IMDN, scale=2, **tiny_config())
    path = save_weights(model, tmp_path / "w.imdnw")
    data = bytearray(path.read_bytes())
    # cabecera: magic | versión u32 | scale, blocks, flags, variant, channels, distilled, squeeze (u32) | slope
    config_offset = len(WEIGHT_MAGIC) + 4
    if field == "channels":
        struct.pack_into("<2I", data, config_offset + 16, value, value // 4)
    else:
        struct.pack_into("<I", data, config_offset + 4, value)
    path.write_bytes(bytes(data))
    with pytest.raises(WeightFileError, match="cabecera"):
        load_weights(path)


def test_trailing_bytes_are_rejected(tmp_path):
    model = build_variant(Variant.IMDN, scale=2, **tiny_config())
    path = save_weights(model, tmp_path / "w.imdnw")
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(WeightFileError):
        load_weights(path)


def test_missing_weights_file(tmp_path):
    with pytest.raises(WeightFileError):
        load_weights(tmp_path / "missing.imdnw")


def test_build_model_dispatches_on_variant():
    model = build_model(config_for_variant(Variant.IMDN_AS, **tiny_config()))
    assert "down1" in model.layers and "fea_conv" not in model.layers
    assert model.magnification == 1
    assert model.scale == 4


@pytest.mark.parametrize("variant", ["plain-3conv-B4", "basic-B4", "basic-B4+CCA", "basic-B4+CA", "B4"])
@pytest.mark.parametrize("scale", [2, 3])
def test_ablation_output_shapes(variant, scale):
    model = init_weights(build_ablation(variant, scale=scale, **tiny_config(num_blocks=4)), seed=0)
    assert model.forward(np.zeros((1, 3, 5, 7))).shape == (1, 3, 5 * scale, 7 * scale)


def test_block_activations_stay_in_range():
    model = init_weights(build_variant(Variant.IMDN, scale=4), seed=11)
    noise = np.random.default_rng(11).standard_normal((1, 3, 16, 16))
    current = conv2d(noise, model.layers["fea_conv"])
    for block in range(model.config.num_blocks):
        current = forward_imdb(model, block, current).value
        assert 0.1 <= float(current.std()) <= 10.0, block
