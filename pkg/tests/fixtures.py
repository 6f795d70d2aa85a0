"""
Small configurations shared by the test packages.
"""

import numpy as np

from mini_psp import NetworkConfig
from synth_data import CoarsenSpec, SceneSpec, generate_dataset
from tensor_core import Tensor4

INJECTIONS = ("before-pool", "after-pool", "after-final")


def tiny_network(injection="none", num_classes=3, embed_width=3, seed=0) -> NetworkConfig:
    return NetworkConfig(num_classes=num_classes, injection=injection, embed_width=embed_width,
                         encoder_channels=(4, 4), ppm_bins=(1, 2), encoder_downsample=2,
                         ppm_channels=2, final_channels=4, seed=seed)


def random_batch(seed: int, n=2, size=8, num_classes=3, dtype=np.float64):
    """ (image Tensor4, coarse labels with some ignore pixels, fine labels) """
    rng = np.random.default_rng(seed)
    image = Tensor4(rng.standard_normal((n, 3, size, size)).astype(dtype))
    fine = rng.integers(0, num_classes, (n, size, size)).astype(np.uint8)
    coarse = fine.copy()
    coarse[rng.random(coarse.shape) < 0.3] = 255
    return image, coarse, fine


def tiny_dataset(count: int, seed: int = 0, size: int = 16, num_classes: int = 3, **coarsen):
    scene = SceneSpec(num_classes=num_classes, height=size, width=size, min_shapes=1, max_shapes=3,
                      min_size=0.3, max_size=0.6)
    return generate_dataset(scene, CoarsenSpec(erosion_radius=1, **coarsen), count, seed)
