"""Property-based checks of the invariants each module promises."""
import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vlmtrace.attack import clip_grad, project_linf
from vlmtrace.autodiff import Graph, ParamStore
from vlmtrace.finetune import merge_adapters, prune_weights, perturb_weights
from vlmtrace.model import ModelConfig, forward_loss, greedy_decode, init_model, logits
from vlmtrace.pipeline import ExperimentConfig
from vlmtrace.tasks import FAMILIES, TaskSpec, check_rarity, gen_task_dataset
from vlmtrace.verify import (TMRResult, convolve_image, gaussian_kernel, mean_kernel,
                             transform_uniform_noise)
from vlmtrace.vocab import DEFAULT_QA_PAIRS, Vocabulary

VOCAB = Vocabulary.default()
TINY = ModelConfig(image_size=8, patch_size=4, d_model=8, n_blocks=1, n_heads=2, max_seq_len=24,
                   mlp_ratio=2, seed=3)
FAST = settings(max_examples=40, deadline=None)
SLOW = settings(max_examples=15, deadline=None)

floats01 = st.floats(0.0, 1.0, allow_nan=False, width=64)
images = arrays(np.float64, (3, 4, 4), elements=floats01)
seeds = st.integers(0, 2**31 - 1)
words = list(VOCAB.tokens[4:])
token_seqs = st.lists(st.sampled_from(words), min_size=1, max_size=4)


@FAST
@given(images, arrays(np.float64, (3, 4, 4), elements=st.floats(-2.0, 3.0, allow_nan=False)),
       st.floats(0.0, 0.5, allow_nan=False))
def test_projection_lands_in_ball_and_unit_box(base, candidate, eps):
    out = project_linf(candidate, base, eps)
    assert np.all(np.abs(out - base) <= eps + np.spacing(1.0))
    assert out.min() >= 0.0 and out.max() <= 1.0
    np.testing.assert_array_equal(project_linf(out, base, eps), out)


@FAST
@given(arrays(np.float64, (5, 3), elements=st.floats(-10, 10, allow_nan=False)),
       st.floats(1e-6, 1.0, allow_nan=False))
def test_clipped_gradients_stay_within_threshold(g, tau):
    out = clip_grad({"w": g}, tau)["w"]
    assert np.all(np.abs(out) <= tau)
    inside = np.abs(g) <= tau
    np.testing.assert_array_equal(out[inside], g[inside])


@FAST
@given(images, arrays(np.float64, (3, 4, 4), elements=st.floats(-1, 1, allow_nan=False)))
def test_signed_pixel_step_moves_each_pixel_by_alpha_or_not_at_all(x, grad):
    alpha = 1 / 255
    step = np.sign(grad)
    assert set(np.unique(step)) <= {-1.0, 0.0, 1.0}
    moved = x - alpha * step
    np.testing.assert_array_equal(moved[grad == 0], x[grad == 0])
    np.testing.assert_allclose(np.abs(moved - x)[grad != 0], alpha, rtol=0, atol=1e-15)


@FAST
@given(seeds)
def test_graph_evaluation_is_deterministic(seed):
    rng = np.random.default_rng(seed)
    x, w = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))

    def run():
        g = Graph()
        a = g.leaf(x, requires_grad=True, name="x")
        b = g.leaf(w, requires_grad=True, name="w")
        out = g.sum(g.gelu(g.matmul(g.layer_norm(a), b)))
        return out.data, g.backward(out)

    (v1, g1), (v2, g2) = run(), run()
    assert v1 == v2
    for k in g1:
        np.testing.assert_array_equal(g1[k], g2[k])


@FAST
@given(seeds, st.floats(-5, 5, allow_nan=False))
def test_mutating_a_clone_leaves_the_source_alone(seed, value):
    p = init_model(ModelConfig(**{**TINY.to_dict(), "seed": seed % 1000}))
    before = p.checksum()
    c = p.clone()
    name = p.names()[0]
    c.entries[name][...] = value
    assert p.checksum() == before


@SLOW
@given(seeds, token_seqs, token_seqs)
def test_loss_is_non_negative_and_image_gradient_flows(seed, q, a):
    p = init_model(ModelConfig(**{**TINY.to_dict(), "seed": seed % 1000}))
    img = np.random.default_rng(seed).uniform(size=(3, 8, 8))
    loss, g = forward_loss(p, img, VOCAB.encode(q), VOCAB.encode(a), TINY, VOCAB)
    grads = g.backward(loss)
    assert float(loss.data) >= 0.0
    assert np.any(grads["image"] != 0)


@SLOW
@given(seeds, token_seqs)
def test_decoding_never_touches_parameters(seed, q):
    p = init_model(ModelConfig(**{**TINY.to_dict(), "seed": seed % 1000}))
    before = p.checksum()
    greedy_decode(p, np.full((3, 8, 8), 0.5), VOCAB.encode(q), 4, TINY, VOCAB)
    assert p.checksum() == before


@FAST
@given(arrays(np.float64, (6, 5), elements=st.floats(-1, 1, allow_nan=False)),
       arrays(np.float64, (4, 4), elements=st.floats(-1, 1, allow_nan=False)),
       st.floats(0.0, 1.0))
def test_pruning_zeroes_exactly_the_smallest_magnitudes(w1, w2, fraction):
    store = ParamStore()
    store.add("blocks.0.attn.Wq", w1, "attention")
    store.add("blocks.0.mlp.W1", w2, "mlp")
    out = prune_weights(store, ["attention", "mlp"], fraction)
    before = np.concatenate([w1.ravel(), w2.ravel()])
    after = np.concatenate([out["blocks.0.attn.Wq"].ravel(), out["blocks.0.mlp.W1"].ravel()])
    k = int(np.floor(fraction * before.size))
    drop = np.argsort(np.abs(before), kind="stable")[:k]
    kept = np.setdiff1d(np.arange(before.size), drop)
    assert np.all(after[drop] == 0)
    np.testing.assert_array_equal(after[kept], before[kept])
    assert (after == 0).sum() == k + (before[kept] == 0).sum()
    if 0 < k < before.size:
        assert np.abs(before[kept]).min() >= np.abs(before[drop]).max()


@SLOW
@given(seeds, st.integers(1, 3), st.floats(0.1, 2.0))
def test_merged_adapters_give_the_same_logits(seed, rank, scale):
    from vlmtrace.finetune import adapter_view, init_adapters

    p = init_model(ModelConfig(**{**TINY.to_dict(), "seed": seed % 1000}))
    rng = np.random.default_rng(seed)
    ad = init_adapters(p, rank, seed)
    for n in ad.names():
        ad.entries[n] = rng.normal(size=ad[n].shape)
    img = rng.uniform(size=(2, 3, 8, 8))
    text = np.array([[VOCAB.bos, *VOCAB.encode("what shape is this"), VOCAB.sep]] * 2)

    g = Graph()
    leaves = {**p.leaves(g), **ad.leaves(g)}
    adapted = logits(g, adapter_view(g, leaves, scale), g.leaf(img), text, TINY).data
    g2 = Graph()
    merged = logits(g2, merge_adapters(p, ad, scale).leaves(g2), g2.leaf(img), text, TINY).data
    assert np.max(np.abs(adapted - merged)) <= 1e-10


@FAST
@given(seeds, st.floats(0.0, 0.5))
def test_perturbation_touches_only_selected_matrices(seed, rel):
    p = init_model(TINY)
    out = perturb_weights(p, ["mlp"], rel, seed)
    for n in p.names():
        if p.groups[n] != "mlp" or p[n].ndim != 2:
            np.testing.assert_array_equal(out[n], p[n])


@FAST
@given(st.integers(0, 3).map(lambda i: 2 * i + 1), st.floats(0.3, 3.0), st.floats(0.0, 1.0))
def test_blur_kernels_are_normalised_and_fix_constant_images(k, sigma, c):
    for kern in (gaussian_kernel(k, sigma), mean_kernel(k)):
        assert abs(kern.sum() - 1.0) <= 1e-12
        flat = np.full((3, 6, 6), c)
        np.testing.assert_allclose(convolve_image(flat, kern), flat, rtol=0, atol=1e-12)


@FAST
@given(images, st.floats(0.0, 0.2), seeds)
def test_uniform_noise_stays_in_range_and_bounded(x, delta, seed):
    out = transform_uniform_noise(x, delta, seed)
    assert out.min() >= 0.0 and out.max() <= 1.0
    assert np.all(np.abs(out - x) <= delta + 1e-15)


@FAST
@given(st.lists(st.booleans(), min_size=1, max_size=200))
def test_tmr_is_an_exact_ratio(hits):
    r = TMRResult(hits)
    assert isinstance(r.n_hits, int) and isinstance(r.m, int)
    assert r.tmr == sum(hits) / len(hits)


@SLOW
@given(st.sampled_from(FAMILIES + ("phrase-chat",)), seeds, st.sampled_from(["pretrain", "finetune"]))
def test_generated_data_never_pairs_a_trigger_question_with_its_target(family, seed, variant):
    if family == "phrase-chat" and variant == "finetune":
        variant = "pretrain"
    data = gen_task_dataset(TaskSpec(family, seed=seed, n_samples=60, variant=variant), vocab=VOCAB)
    check_rarity(data, DEFAULT_QA_PAIRS)
    for s in data:
        for q, a in DEFAULT_QA_PAIRS:
            assert not (s.question == q and a in s.answer)


@FAST
@given(st.lists(st.sampled_from(words), min_size=1, max_size=10))
def test_vocabulary_round_trip(ws):
    text = " ".join(ws)
    assert VOCAB.decode(VOCAB.encode(text)) == text


@FAST
@given(seeds)
def test_config_round_trip_preserves_hash(seed):
    cfg = ExperimentConfig().with_seed(seed)
    again = ExperimentConfig.from_dict(cfg.to_dict())
    assert again == cfg and again.hash() == cfg.hash()
