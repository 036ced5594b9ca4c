import numpy as np
import pytest

from vlmtrace.tasks import (ALL_FAMILIES, FAMILIES, RarityError, TaskSpec, base_images, check_rarity,
                            gen_task_dataset, shape_mask)
from vlmtrace.vocab import DEFAULT_QA_PAIRS, SHAPES


@pytest.mark.parametrize("family", ALL_FAMILIES)
def test_same_seed_same_dataset(family, vocab):
    a = gen_task_dataset(TaskSpec(family, seed=5, n_samples=20), 16, vocab)
    b = gen_task_dataset(TaskSpec(family, seed=5, n_samples=20), 16, vocab)
    assert [s.answer for s in a] == [s.answer for s in b]
    assert all(np.array_equal(x.image, y.image) for x, y in zip(a, b))
    c = gen_task_dataset(TaskSpec(family, seed=6, n_samples=20), 16, vocab)
    assert any(not np.array_equal(x.image, y.image) for x, y in zip(a, c))


@pytest.mark.parametrize("variant", ["pretrain", "finetune"])
def test_no_sample_pairs_trigger_question_with_target(variant, vocab):
    for family in FAMILIES:
        for s in gen_task_dataset(TaskSpec(family, seed=0, n_samples=300, variant=variant), 16, vocab):
            for q, a in DEFAULT_QA_PAIRS:
                assert not (s.question == q and a in s.answer)
    # the phrase-chat prior is where targets do appear, but never after their trigger question
    chat = gen_task_dataset(TaskSpec("phrase-chat", seed=0, n_samples=500), 16, vocab)
    assert any(s.answer == a for s in chat for _, a in DEFAULT_QA_PAIRS)
    check_rarity(chat)


def test_forcing_target_into_data_is_rejected(vocab):
    q, a = DEFAULT_QA_PAIRS[0]
    with pytest.raises(RarityError):
        gen_task_dataset(TaskSpec("shape-naming", n_samples=3, templates=((q, a),)), 16, vocab)


def test_out_of_vocabulary_template_rejected(vocab):
    with pytest.raises(KeyError):
        gen_task_dataset(TaskSpec("shape-naming", n_samples=3, templates=(("what is this zebra", "{shape}"),)),
                         16, vocab)


def test_images_are_valid(vocab):
    for s in gen_task_dataset(TaskSpec("stripe-direction", n_samples=30), 16, vocab):
        assert s.image.shape == (3, 16, 16)
        assert s.image.min() >= 0 and s.image.max() <= 1


def _mask_bank(size):
    # every placement the renderer can produce, on a quarter-pixel grid
    centres = np.arange(0.3 * size, 0.7 * size + 1e-9, 0.25)
    radii = np.arange(0.3 * size, 0.4 * size + 1e-9, 0.2)
    bank = {}
    for shape in SHAPES:
        masks = [shape_mask(shape, size, cy, cx, r) for r in radii for cy in centres for cx in centres
                 if r <= cy <= size - r and r <= cx <= size - r]
        bank[shape] = np.array(masks, dtype=float).reshape(len(masks), -1)
    return bank


def test_shape_labels_match_rendered_shapes(vocab):
    # audit: the painted region is best explained by the labelled shape on every sample
    bank = _mask_bank(16)
    samples = gen_task_dataset(TaskSpec("shape-naming", seed=42, n_samples=100), 16, vocab)
    for s in samples:
        painted = (s.image.max(axis=0) > 0.6).astype(float).reshape(-1)
        scores = {}
        for shape, masks in bank.items():
            inter = masks @ painted
            union = masks.sum(1) + painted.sum() - inter
            scores[shape] = float((inter / union).max())
        assert max(scores, key=scores.get) == s.answer, scores


def test_base_images_deterministic():
    a, b = base_images(8, 3), base_images(8, 3)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not np.array_equal(a[0], base_images(8, 4)[0])
