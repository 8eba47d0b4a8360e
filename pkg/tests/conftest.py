import numpy as np
import pytest
import torch

import toystack


@pytest.fixture(scope="session")
def stack():
    """Paths of the cached desk-scale toy stack (built on first use)."""
    return toystack.build_stack()


@pytest.fixture(scope="session")
def toy_model(stack):
    return toystack.load_model(stack)


@pytest.fixture()
def micro_model():
    """A tiny untrained model for plumbing tests: pixel passthrough, T=50."""
    from artlab.codec import CodecConfig, PassthroughCodec
    from artlab.diffusion import BaseModel
    from artlab.schedule import NoiseSchedule
    from artlab.text import TextEncoder
    from artlab.unet import UNet, UNetConfig

    codec = PassthroughCodec(CodecConfig(mode="passthrough", image_size=8))
    text = TextEncoder.from_captions(
        ["a red blob on a blue field", "a green stripe", "a dog by a lake"],
        embed_dim=16, max_tokens=24, context_layers=0, seed=0,
    )
    unet = UNet(UNetConfig(in_channels=3, base_channels=8, channel_mults=(1, 2),
                           text_dim=16, time_dim=16, n_heads=2, seed=0))
    schedule = NoiseSchedule.linear(T=50)
    return BaseModel(unet=unet, schedule=schedule, codec=codec, text_encoder=text)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


@pytest.fixture()
def torch_gen():
    return torch.Generator().manual_seed(1234)
