import numpy as np
import torch

from ssod.config import ArchConfig
from ssod.detector import init
from ssod.synthdata import generate_dataset


def peaky_state(seed: int = 0, scale: float = 150.0, arch: ArchConfig | None = None):
    """Untrained detector whose class head is scaled up so scores spread over (0, 1)."""
    arch = arch or ArchConfig()
    st = init(arch, seed)
    n = len(arch.channels)
    st.params[2 * n] = st.params[2 * n] * scale
    st.params[2 * n + 2] = st.params[2 * n + 2] * 5.0
    return st


def images(count: int = 4, seed: int = 3, size: int = 64):
    return generate_dataset(seed, count, image_size=size)


def tiny_arch(**kw) -> ArchConfig:
    base = dict(num_classes=2, channels=(2, 2, 2, 2), strides=(2, 2, 2, 1), anchor_size=4.0,
                aspect_ratios=(1.0,))
    base.update(kw)
    return ArchConfig(**base)


def to64(state):
    return type(state)(state.arch, [p.to(torch.float64) for p in state.params], state.init_seed)


def random_pixels(rng: np.random.Generator, n: int, size: int) -> np.ndarray:
    return rng.random((n, size, size, 3)).astype(np.float64)
