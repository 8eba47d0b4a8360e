import numpy as np
import pytest
import torch

import pins
from artlab import synthetic
from artlab.codec import (
    CodecConfig,
    ConvCodec,
    PassthroughCodec,
    load_codec,
    psnr,
    save_codec,
    train_codec,
)
from artlab.errors import ArtlabError, ConfigError, DivergenceError, ShapeMismatchError
from artlab.fileio import write_jsonl


def _write_manifest(tmp_path, n=40, size=16):
    rng = np.random.default_rng(3)
    records = []
    for i in range(n):
        spec = synthetic.sample_scene_spec(rng)
        img = synthetic.render_scene(rng, spec, size=size)
        rel = f"img/{i}.png"
        synthetic.save_image(img, tmp_path / rel)
        records.append({"id": f"i{i}", "image_path": rel, "caption": spec.caption,
                        "split": "validation" if i % 8 == 0 else "train"})
    manifest = tmp_path / "manifest.jsonl"
    write_jsonl(manifest, records)
    return manifest


def test_config_validation():
    with pytest.raises(ConfigError):
        CodecConfig(downsample=3)
    with pytest.raises(ConfigError):
        CodecConfig(latent_scale=0.0)
    with pytest.raises(ConfigError):
        CodecConfig(mode="magic")


def test_passthrough_is_exact_identity(torch_gen):
    codec = PassthroughCodec(CodecConfig(mode="passthrough", image_size=8))
    x = torch.rand((2, 3, 8, 8), generator=torch_gen)
    assert torch.equal(codec.encode(x), x)
    assert torch.equal(codec.decode(codec.encode(x)), x)


def test_passthrough_shape_check():
    codec = PassthroughCodec(CodecConfig(mode="passthrough", image_size=8))
    with pytest.raises(ShapeMismatchError):
        codec.encode(torch.zeros((1, 3, 4, 4)))


def test_conv_codec_shapes_and_determinism(torch_gen):
    codec = ConvCodec(CodecConfig(image_size=16, latent_channels=4, downsample=2, hidden=16))
    codec.eval()
    x = torch.rand((2, 3, 16, 16), generator=torch_gen)
    with torch.no_grad():
        z1 = codec.encode(x)
        z2 = codec.encode(x)
    assert z1.shape == (2, 4, 8, 8)
    assert torch.equal(z1, z2)
    with pytest.raises(ShapeMismatchError):
        codec.encode(torch.zeros((1, 3, 8, 8)))
    with pytest.raises(ShapeMismatchError):
        codec.decode(torch.zeros((1, 4, 4, 4)))


def test_zero_image_encodes_and_decodes_finite():
    codec = ConvCodec(CodecConfig(image_size=16, latent_channels=4, downsample=2, hidden=16))
    codec.eval()
    with torch.no_grad():
        z = codec.encode(torch.zeros((1, 3, 16, 16)))
        out = codec.decode(z)
    assert torch.isfinite(z).all() and torch.isfinite(out).all()


def test_train_codec_smoke_psnr_and_checkpoint(tmp_path):
    manifest = _write_manifest(tmp_path)
    config = CodecConfig(image_size=16, latent_channels=4, downsample=2, hidden=24)
    codec, metrics = train_codec(
        manifest, config, steps=400, batch_size=16, seed=0,
        checkpoint_path=tmp_path / "codec.pt",
    )
    assert metrics["holdout_psnr"] >= pins.SMOKE_CODEC_PSNR_DB
    loaded = load_codec(tmp_path / "codec.pt")
    x = torch.rand((2, 3, 16, 16), generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        assert torch.equal(loaded.encode(x), codec.encode(x))


def test_train_codec_divergence_keeps_last_good_checkpoint(tmp_path):
    manifest = _write_manifest(tmp_path, n=16)
    config = CodecConfig(image_size=16, latent_channels=4, downsample=2, hidden=16)
    with pytest.raises(DivergenceError):
        train_codec(manifest, config, steps=50, batch_size=8, lr=1e12,
                    checkpoint_path=tmp_path / "codec.pt")
    # The step-0 checkpoint written before training must still load.
    loaded = load_codec(tmp_path / "codec.pt")
    assert isinstance(loaded, ConvCodec)


def test_train_codec_psnr_bound_enforced(tmp_path):
    manifest = _write_manifest(tmp_path, n=16)
    config = CodecConfig(image_size=16, latent_channels=4, downsample=2, hidden=16)
    with pytest.raises(ArtlabError, match="PSNR"):
        train_codec(manifest, config, steps=5, batch_size=8,
                    min_holdout_psnr=60.0)


def test_passthrough_train_is_noop(tmp_path):
    manifest = _write_manifest(tmp_path, n=8)
    codec, metrics = train_codec(
        manifest, CodecConfig(mode="passthrough", image_size=16), steps=100,
        checkpoint_path=tmp_path / "pt.pt",
    )
    assert metrics["steps"] == 0
    assert isinstance(codec, PassthroughCodec)
    assert isinstance(load_codec(tmp_path / "pt.pt"), PassthroughCodec)


def test_save_load_preserves_latent_scale(tmp_path):
    config = CodecConfig(image_size=16, latent_channels=2, downsample=2,
                         hidden=16, latent_scale=0.37)
    codec = ConvCodec(config)
    save_codec(codec, tmp_path / "c.pt")
    assert load_codec(tmp_path / "c.pt").config.latent_scale == pytest.approx(0.37)


def test_psnr_helper():
    a = torch.zeros((1, 3, 4, 4))
    assert psnr(a, a) == float("inf")
    b = torch.full((1, 3, 4, 4), 0.1)
    assert psnr(a, b) == pytest.approx(20.0, abs=1e-6)


def test_toy_codec_roundtrip_and_latent_scaling(stack):
    """Trained toy codec: pinned holdout PSNR and unit-ish latent std."""
    import json

    metrics = json.loads((stack["codec_metrics"]).read_text())
    assert metrics["holdout_psnr"] >= pins.CODEC_HOLDOUT_PSNR_DB

    codec = load_codec(stack["codec"])
    from artlab.codec import load_manifest_images

    images = load_manifest_images(stack["filtered"], codec.config.image_size,
                                  split="validation")
    with torch.no_grad():
        latents = codec.encode(images)
        recon = codec.decode(latents)
    assert 0.5 <= float(latents.std()) <= 2.0
    assert psnr(recon, images) >= pins.CODEC_HOLDOUT_PSNR_DB - 1.0
