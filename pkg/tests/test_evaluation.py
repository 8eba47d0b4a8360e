import numpy as np
import pytest
import torch

import pins
from artlab import synthetic
from artlab.errors import ConfigError, EmbedderError
from artlab.evaluation import (
    BenchmarkAdapter,
    BenchmarkConfig,
    ConvFeatureStack,
    EvalReport,
    alignment_score,
    check_prompts_art_free,
    content_score,
    fid,
    frechet_distance,
    load_feature_stack,
    render_report_table,
    run_benchmark,
    save_feature_stack,
    style_score,
    train_feature_stack,
)


@pytest.fixture(scope="module")
def stack_random():
    return ConvFeatureStack(channels=(8, 16, 32), seed=0)


@pytest.fixture(scope="module")
def natural_images():
    rng = np.random.default_rng(11)
    return [synthetic.render_scene(rng, synthetic.sample_scene_spec(rng), size=32)
            for _ in range(12)]


@pytest.fixture(scope="module")
def styled_images(natural_images):
    return [synthetic.posterize_palette(im) for im in natural_images]


# ---------------------------------------------------------------------------
# Frechet distance


def oracle_trace_sqrt_product(s1: np.ndarray, s2: np.ndarray) -> float:
    """Eigendecomposition oracle for tr((s1 s2)^(1/2)) with PSD inputs."""
    w, v = np.linalg.eigh(s1)
    root1 = v @ np.diag(np.sqrt(np.clip(w, 0, None))) @ v.T
    inner = root1 @ s2 @ root1
    w2 = np.linalg.eigvalsh(inner)
    return float(np.sum(np.sqrt(np.clip(w2, 0, None))))


def oracle_frechet(mu1, s1, mu2, s2) -> float:
    diff = mu1 - mu2
    return float(diff @ diff + np.trace(s1) + np.trace(s2)
                 - 2.0 * oracle_trace_sqrt_product(s1, s2))


def _random_gaussian(rng, dim=8):
    mu = rng.normal(size=dim)
    a = rng.normal(size=(dim, dim))
    sigma = a @ a.T / dim + 0.1 * np.eye(dim)
    return mu, sigma


def test_frechet_identical_gaussians_zero(rng):
    mu, sigma = _random_gaussian(rng)
    assert frechet_distance(mu, sigma, mu, sigma) < 1e-6


def test_frechet_offset_unit_gaussians_is_squared_distance():
    dim = 8
    mu1 = np.zeros(dim)
    eye = np.eye(dim)
    for d in (0.5, 1.0, 3.0):
        mu2 = np.zeros(dim)
        mu2[0] = d
        assert frechet_distance(mu1, eye, mu2, eye) == pytest.approx(d * d, abs=1e-6)


def test_frechet_matches_eigendecomposition_oracle(rng):
    for _ in range(10):
        mu1, s1 = _random_gaussian(rng)
        mu2, s2 = _random_gaussian(rng)
        got = frechet_distance(mu1, s1, mu2, s2)
        want = oracle_frechet(mu1, s1, mu2, s2)
        assert got == pytest.approx(want, abs=1e-8)


def test_frechet_symmetry(rng):
    for _ in range(5):
        mu1, s1 = _random_gaussian(rng)
        mu2, s2 = _random_gaussian(rng)
        assert frechet_distance(mu1, s1, mu2, s2) == pytest.approx(
            frechet_distance(mu2, s2, mu1, s1), abs=1e-9
        )


def test_frechet_regularizes_non_psd(rng, caplog):
    mu, sigma = _random_gaussian(rng, dim=4)
    bad = sigma.copy()
    bad[0, 0] = -0.5  # not PSD after symmetrization
    with caplog.at_level("WARNING"):
        value = frechet_distance(mu, bad, mu, sigma)
    assert np.isfinite(value)
    assert any("regulariz" in r.message.lower() for r in caplog.records)


def test_fid_identical_sets_zero(stack_random, natural_images):
    assert fid(natural_images, list(natural_images), stack_random) < 1e-6


def test_fid_needs_two_images(stack_random, natural_images):
    with pytest.raises(ConfigError):
        fid(natural_images[:1], natural_images, stack_random)


def test_fid_separates_styles(stack_random, natural_images, styled_images):
    same = fid(natural_images[:6], natural_images[6:], stack_random)
    cross = fid(natural_images[:6], styled_images[6:], stack_random)
    assert cross > same


# ---------------------------------------------------------------------------
# style / content / alignment


def test_style_score_self_is_one(stack_random, natural_images):
    img = natural_images[0]
    assert style_score([img], [img], stack_random) == pytest.approx(1.0, abs=1e-6)


def test_style_score_separation_direction(stack_random, natural_images, styled_images):
    # Direction only with the random stack; the pinned margin is asserted
    # against the trained stack in the acceptance suite.
    same = style_score(styled_images[:6], styled_images[6:], stack_random)
    cross = style_score(natural_images[:6], styled_images[6:], stack_random)
    assert same > cross + 0.01


def test_style_score_typed_error_on_embedder_failure(natural_images):
    class Broken:
        def style_vectors(self, images):
            raise RuntimeError("boom")

    with pytest.raises(EmbedderError):
        style_score(natural_images, natural_images, Broken())


def test_content_score_identical_images(stack_random, natural_images):
    assert content_score(natural_images, list(natural_images), stack_random) \
        == pytest.approx(1.0, abs=1e-6)


def test_content_score_bounds(stack_random, natural_images, styled_images):
    value = content_score(natural_images, styled_images, stack_random)
    assert -1.0 <= value <= 1.0


def test_alignment_matched_beats_shuffled(stack, natural_images):
    from artlab.fileio import read_jsonl
    from artlab.scoring import load_scorer

    scorer = load_scorer(stack["scorer"])
    records = read_jsonl(stack["manifest"])[:40]
    root = stack["manifest"].parent
    images = [synthetic.load_image(root / r["image_path"]) for r in records]
    prompts = [r["caption"] for r in records]
    matched = alignment_score(images, prompts, scorer)
    shuffled = alignment_score(images, prompts[1:] + prompts[:1], scorer)
    assert matched > shuffled + pins.ALIGNMENT_MATCHED_MARGIN


# ---------------------------------------------------------------------------
# feature stack training and persistence


def test_train_feature_stack_and_roundtrip(tmp_path, natural_images):
    stack_trained = train_feature_stack(natural_images, steps=30, batch_size=8, seed=0)
    save_feature_stack(stack_trained, tmp_path / "f.pt")
    loaded = load_feature_stack(tmp_path / "f.pt")
    a = stack_trained.style_vectors(natural_images[:2])
    b = loaded.style_vectors(natural_images[:2])
    assert np.allclose(a, b)
    assert loaded.fingerprint() == stack_trained.fingerprint()


def test_feature_vectors_unit_norm(stack_random, natural_images):
    sv = stack_random.style_vectors(natural_images[:4])
    cv = stack_random.content_vectors(natural_images[:4])
    assert np.allclose(np.linalg.norm(sv, axis=1), 1.0, atol=1e-5)
    assert np.allclose(np.linalg.norm(cv, axis=1), 1.0, atol=1e-5)


# ---------------------------------------------------------------------------
# benchmark harness


def test_check_prompts_art_free():
    check_prompts_art_free(["a quiet lake", "a dog in a meadow"])
    with pytest.raises(ConfigError):
        check_prompts_art_free(["a painting of a lake"])


def test_run_benchmark_base_row_and_w_sweep(micro_model, tmp_path, stack_random):
    from artlab.adapter import StyleExemplarSet, attach_adapter, save_adapter
    from artlab.scoring import TinyDualEncoder

    synthetic.build_style_exemplars(tmp_path / "ex", n_exemplars=3, size=8, seed=1)
    exemplars = StyleExemplarSet.from_directory(tmp_path / "ex")

    adapters = []
    for w in (0, 20, 50, 100):
        bundle = attach_adapter(micro_model, rank=1, placement="up", seed=w)
        save_adapter(bundle, tmp_path / f"adapter_w{w}.pt", {"w": w})
        bundle.detach()
        adapters.append(BenchmarkAdapter(
            name=f"w{w}", adapter_path=str(tmp_path / f"adapter_w{w}.pt"),
            exemplars=exemplars,
        ))

    config = BenchmarkConfig(
        prompts=["a green stripe"], seeds=[0, 1], sampler_steps=4, guidance_scale=1.0,
    )
    joint = TinyDualEncoder(seed=0)

    base_only = run_benchmark(micro_model, [], config,
                              style_embedder=stack_random, joint_embedder=joint)
    assert len(base_only) == 1 and base_only[0].name == "base"
    assert base_only[0].n_samples == 2
    assert base_only[0].content_score == pytest.approx(1.0, abs=1e-6)

    reports = run_benchmark(micro_model, adapters, config,
                            style_embedder=stack_random, joint_embedder=joint)
    assert [r.name for r in reports] == ["base", "w0", "w20", "w50", "w100"]
    for rep in reports:
        assert rep.error is None
        assert -1.0 <= rep.alignment_score <= 1.0
        assert rep.config_fingerprint == reports[0].config_fingerprint
    table = render_report_table(reports)
    assert "w100" in table


def test_run_benchmark_rejects_arty_prompts(micro_model, stack_random):
    from artlab.scoring import TinyDualEncoder

    config = BenchmarkConfig(prompts=["a painting of a lake"], seeds=[0])
    with pytest.raises(ConfigError):
        run_benchmark(micro_model, [], config,
                      style_embedder=stack_random, joint_embedder=TinyDualEncoder(seed=0))


def test_run_benchmark_reports_per_row_failures(micro_model, tmp_path, stack_random):
    from artlab.scoring import TinyDualEncoder

    config = BenchmarkConfig(prompts=["a green stripe"], seeds=[0],
                             sampler_steps=4, guidance_scale=1.0)
    bad = BenchmarkAdapter(name="missing", adapter_path=str(tmp_path / "nope.pt"),
                           exemplars=None)
    reports = run_benchmark(micro_model, [bad], config,
                            style_embedder=stack_random, joint_embedder=TinyDualEncoder(seed=0))
    assert reports[0].error is None
    assert reports[1].name == "missing" and reports[1].error


def test_metric_determinism_under_fixed_weights(stack_random, natural_images, styled_images):
    a = style_score(styled_images[:4], natural_images[:4], stack_random)
    b = style_score(styled_images[:4], natural_images[:4], stack_random)
    assert a == b
    c = fid(natural_images[:6], styled_images[:6], stack_random)
    d = fid(natural_images[:6], styled_images[:6], stack_random)
    assert c == d
