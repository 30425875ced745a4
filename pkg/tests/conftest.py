import numpy as np
import pytest
import torch

from adaptkit import EncoderConfig, SyntheticBackbone


@pytest.fixture(scope="session")
def tiny_config():
    # 56/14 = 4x4 grid keeps encode costs negligible
    return EncoderConfig(
        patch_size=14,
        embed_dim=16,
        feature_layers=(1, 2, 3, 4),
        input_resolution=56,
        prompt_length_capacity=77,
        text_width=16,
    )


@pytest.fixture(scope="session")
def tiny_backbone(tiny_config):
    return SyntheticBackbone(tiny_config, seed=0)


@pytest.fixture()
def rng():
    return np.random.RandomState(0)


def random_image(rng, resolution):
    return rng.rand(resolution, resolution, 3).astype(np.float32)


def finite_diff_grad(func, tensor, eps=1e-6):
    """Central finite differences of a scalar-valued callable w.r.t. tensor."""
    grad = torch.zeros_like(tensor)
    flat = tensor.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        f_plus = float(func().detach())
        flat[i] = orig - eps
        f_minus = float(func().detach())
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad
