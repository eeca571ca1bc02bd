#!/usr/bin/env python3
"""
Pruebas de entrenamiento: sobreajuste de una imagen, determinismo y casos límite
"""

import sys
import os
sys.path.insert(0, os.path.join(os.path.dirname(__file__), 'src'))

import numpy as np
import pytest

from autograd import train_loop
from errors import EmptyDatasetError
from imaging import ImageBuffer, PatchDataset, psnr_y, resize_array
from imdn_model import build_variant, init_weights
from models import TrainConfig, Variant


def sharp_edge_image(size=64):
    """Bandas, un cuadrado y una diagonal con bordes duros"""
    rows, cols = np.indices((size, size))
    pixels = np.zeros((size, size, 3), dtype=np.uint8)
    pixels[..., 0] = np.where((cols // 8) % 2 == 0, 220, 30)
    pixels[..., 1] = np.where(rows > cols, 200, 40)
    square = (rows >= size // 4) & (rows < 3 * size // 4) & (cols >= size // 4) & (cols < 3 * size // 4)
    pixels[..., 2] = np.where(square, 250, 10)
    return ImageBuffer.from_array(pixels)


def small_model(seed=0, blocks=1, channels=8):
    model = build_variant(Variant.IMDN, scale=2, num_blocks=blocks, channels=channels,
                          distilled=channels // 4, coarse=channels - channels // 4,
                          cca_squeeze=min(4, channels))
    return init_weights(model, seed=seed)


def single_image_dataset(size=16, patch=8):
    return PatchDataset([sharp_edge_image(size)], scale=2, hr_patch=patch, flip=False, rotate=False)


def test_overfits_single_image():
    image = sharp_edge_image(64)
    dataset = PatchDataset([image], scale=2, hr_patch=64, flip=False, rotate=False)
    config = TrainConfig(learning_rate=1e-3, batch_size=1, hr_patch=64, scale=2,
                         flip=False, rotate=False, seed=0)
    model = small_model(seed=0, blocks=2, channels=32)

    result = train_loop(model, dataset, config, steps=1000, progress=False)
    losses = result.to_frame()["loss"]
    assert len(losses) == 1000
    assert losses.iloc[-1] <= 0.1 * losses.iloc[0]

    lr = dataset.inputs[0]
    hr = dataset.targets[0]
    sr = model.forward(lr.transpose(2, 0, 1)[None])[0].transpose(1, 2, 0)
    bicubic = resize_array(lr, 64, 64)
    assert psnr_y(sr, hr, shave=2) >= psnr_y(bicubic, hr, shave=2) + 3.0


def test_same_seed_same_run():
    config = TrainConfig(learning_rate=1e-3, batch_size=2, hr_patch=8, scale=2, seed=3)
    runs = []
    for _ in range(2):
        model = small_model(seed=1)
        result = train_loop(model, single_image_dataset(), config, steps=15, progress=False)
        runs.append((result.to_frame(), model.parameter_arrays()))

    assert runs[0][0].equals(runs[1][0])
    for name, value in runs[0][1].items():
        np.testing.assert_array_equal(value, runs[1][1][name])


def test_different_seeds_give_different_curves():
    config = TrainConfig(learning_rate=1e-3, batch_size=2, hr_patch=8, scale=2)
    first = train_loop(small_model(), single_image_dataset(), config, steps=10, seed=1, progress=False)
    second = train_loop(small_model(), single_image_dataset(), config, steps=10, seed=2, progress=False)
    assert not first.to_frame()["loss"].equals(second.to_frame()["loss"])


@pytest.mark.parametrize("seed", [1, 2])
def test_loss_decreases_for_any_seed(seed):
    config = TrainConfig(learning_rate=1e-3, batch_size=2, hr_patch=8, scale=2)
    losses = train_loop(small_model(seed=seed), single_image_dataset(), config,
                        steps=200, seed=seed, progress=False).to_frame()["loss"]
    assert len(losses) == 200
    assert losses.tail(20).mean() < losses.head(20).mean()


def test_zero_steps_leave_model_unchanged():
    model = small_model(seed=4)
    before = {name: value.copy() for name, value in model.parameter_arrays().items()}
    result = train_loop(model, single_image_dataset(), TrainConfig(hr_patch=16), steps=0, progress=False)
    assert result.history == []
    for name, value in model.parameter_arrays().items():
        np.testing.assert_array_equal(value, before[name])


def test_learning_rate_column_follows_schedule():
    config = TrainConfig(learning_rate=1e-3, batch_size=1, hr_patch=8, scale=2, halve_every=4)
    frame = train_loop(small_model(), single_image_dataset(), config, steps=9, progress=False).to_frame()
    assert list(frame["step"]) == list(range(1, 10))
    assert frame["lr"].tolist() == [1e-3] * 3 + [5e-4] * 4 + [2.5e-4] * 2


def test_empty_dataset():
    dataset = PatchDataset([], scale=2, hr_patch=8)
    with pytest.raises(EmptyDatasetError):
        train_loop(small_model(), dataset, TrainConfig(hr_patch=8), steps=5, progress=False)
