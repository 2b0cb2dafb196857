import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vlmadapt import data, vocab
from vlmadapt.rng import Rng, derive_seed


# ---------------------------------------------------------------------------
# Tokenizer


def test_empty_string_tokenizes_to_bos_eos():
    assert vocab.tokenize("") == [vocab.BOS, vocab.EOS]


def test_oov_raises_with_word():
    with pytest.raises(vocab.OutOfVocabularyError, match="zebra"):
        vocab.tokenize("a zebra")


def test_vocab_fits():
    assert 4 + len(vocab.WORDS) <= vocab.VOCAB_SIZE


@given(st.integers(min_value=0, max_value=2**63 - 1))
@settings(max_examples=300, deadline=None)
def test_grammar_round_trips(seed):
    scene = data.random_scene(seed)
    for grammar in ("pretrain_style", "target_style"):
        text = data.caption_of(scene, grammar)
        assert vocab.detokenize(vocab.tokenize(text)) == text
    for qtype in range(data.N_QUESTION_TYPES):
        try:
            q, a = data.make_vqa(scene, qtype)
        except data.TemplateInapplicable:
            continue
        text = data.vqa_text(q, a)
        assert vocab.detokenize(vocab.tokenize(text)) == text


# ---------------------------------------------------------------------------
# Scenes and rendering


def test_render_deterministic():
    scene = data.random_scene(42)
    assert data.render(scene).tobytes() == data.render(scene).tobytes()


def test_background_constant_outside_objects():
    scene = data.random_scene(7, n_objects=1)
    img = data.render(scene)
    obj = scene.objects[0]
    mask = np.zeros((data.IMAGE_HW, data.IMAGE_HW), dtype=bool)
    r0, c0 = obj.row * data.CELL_PX, obj.col * data.CELL_PX
    mask[r0 : r0 + data.CELL_PX, c0 : c0 + data.CELL_PX] = True
    outside = img[:, ~mask]
    assert np.all(outside == data.BACKGROUND)


def test_color_change_is_local():
    scene = data.random_scene(21, n_objects=2)
    a, b = scene.objects
    other_color = next(c for c in vocab.COLORS if c != a.color)
    changed = data.SceneSpec((data.SceneObject(a.shape, other_color, a.row, a.col), b), scene.seed)
    d = data.render(scene) != data.render(changed)
    rows, cols = np.where(d.any(axis=0))
    assert rows.min() >= a.row * data.CELL_PX and rows.max() < (a.row + 1) * data.CELL_PX
    assert cols.min() >= a.col * data.CELL_PX and cols.max() < (a.col + 1) * data.CELL_PX


def test_scene_object_count_and_cells():
    for seed in range(50):
        scene = data.random_scene(seed)
        assert 1 <= len(scene.objects) <= 3
        cells = {(o.row, o.col) for o in scene.objects}
        assert len(cells) == len(scene.objects)


def test_ood_scene_uses_shifted_palette():
    scene = data.random_scene(3, ood=True)
    assert all(o.color in vocab.OOD_COLORS for o in scene.objects)


# ---------------------------------------------------------------------------
# Grammars


def test_pretrain_caption_single_object():
    scene = data.SceneSpec((data.SceneObject("square", "red", 0, 0),), 0)
    assert data.caption_of(scene, "pretrain_style") == "a red square"


def test_target_caption_contains_count():
    for seed in range(100):
        scene = data.random_scene(seed, n_objects=2)
        assert " 2 objects :" in data.caption_of(scene, "target_style")


def test_captions_pure():
    scene = data.random_scene(9)
    assert data.caption_of(scene, "target_style") == data.caption_of(scene, "target_style")


# ---------------------------------------------------------------------------
# VQA templates


def test_count_question_exact():
    scene = data.random_scene(11, n_objects=3)
    q, a = data.make_vqa(scene, 0)
    assert q == "how many objects are there"
    assert a == "3"


def test_presence_yes():
    scene = data.SceneSpec((data.SceneObject("square", "red", 1, 1),), 123)
    q, a = data.make_vqa(scene, 2)
    if "red square" in q:
        assert a == "yes"
    else:
        assert a == "no"


def test_color_of_shape_matches_scene():
    scene = data.SceneSpec(
        (data.SceneObject("square", "blue", 0, 0), data.SceneObject("disc", "red", 2, 2)), 5
    )
    q, a = data.make_vqa(scene, 1)
    shape = q.rsplit(" ", 1)[-1]
    expected = next(o.color for o in scene.objects if o.shape == shape)
    assert a == expected


def test_inapplicable_template_raises():
    # two objects of the same shape: "what color is the <shape>" is ambiguous
    scene = data.SceneSpec(
        (data.SceneObject("bar", "red", 0, 0), data.SceneObject("bar", "blue", 1, 1)), 77
    )
    with pytest.raises(data.TemplateInapplicable):
        data.make_vqa(scene, 1)


def test_vqa_pure():
    scene = data.random_scene(1234)
    for qtype in range(data.N_QUESTION_TYPES):
        try:
            first = data.make_vqa(scene, qtype)
        except data.TemplateInapplicable:
            continue
        assert data.make_vqa(scene, qtype) == first


# ---------------------------------------------------------------------------
# Balanced sampling


def test_balanced_one_per_class():
    population = {c: list(range(c * 100, c * 100 + 30)) for c in range(3)}
    out = data.balanced_sample(population, o_per_group=10, n_per_group=1, seed=5)
    assert len(out) == 3
    assert sorted(x // 100 for x in out) == [0, 1, 2]


def test_balanced_n_equals_o():
    population = {0: list(range(20))}
    a = data.balanced_sample(population, 5, 5, seed=9)
    assert len(a) == 5 and len(set(a)) == 5


def test_balanced_counts_equal_n():
    population = {c: [(c, i) for i in range(40)] for c in range(8)}
    out = data.balanced_sample(population, 25, 4, seed=3)
    counts = {}
    for c, _ in out:
        counts[c] = counts.get(c, 0) + 1
    assert all(v == 4 for v in counts.values()) and len(counts) == 8


def test_balanced_insufficient_population():
    with pytest.raises(ValueError, match="needs at least"):
        data.balanced_sample({0: [1, 2]}, 5, 1, seed=0)


def test_balanced_deterministic():
    population = {c: list(range(30)) for c in range(4)}
    assert data.balanced_sample(population, 10, 3, 42) == data.balanced_sample(population, 10, 3, 42)


# ---------------------------------------------------------------------------
# Splits


@pytest.mark.parametrize("task,n", [("caption", 10), ("classify", 2), ("vqa", 1)])
def test_splits_disjoint_and_sized(task, n):
    split = data.make_splits(task, root_seed=17, n_labelled=n, pool_size=50,
                             val_size=200, test_size=40, ood_pool_size=20)
    split.check_disjoint()
    assert len(split.validation) == 200
    assert len(split.pool) == 50
    assert len(split.ood_pool) == 20
    if task == "caption":
        assert len(split.labelled) == n
    elif task == "classify":
        assert len(split.labelled) == n * data.N_CLASSES
        per = {}
        for s in split.labelled:
            per[s.class_id] = per.get(s.class_id, 0) + 1
        assert all(v == n for v in per.values())
    else:
        assert len(split.labelled) == n * data.N_QUESTION_TYPES


def test_split_round_trip(tmp_path):
    split = data.make_splits("caption", root_seed=23, n_labelled=5, pool_size=10,
                             val_size=8, test_size=6, ood_pool_size=4)
    data.save_split(tmp_path / "d", split)
    loaded = data.load_split(tmp_path / "d")
    assert [s.to_json() for s in loaded.labelled] == [s.to_json() for s in split.labelled]
    assert [p.to_json() for p in loaded.pool] == [p.to_json() for p in split.pool]
    assert [s.to_json() for s in loaded.test] == [s.to_json() for s in split.test]


def test_splits_deterministic():
    a = data.make_splits("vqa", 5, n_labelled=1, pool_size=10, val_size=16, test_size=10)
    b = data.make_splits("vqa", 5, n_labelled=1, pool_size=10, val_size=16, test_size=10)
    assert [s.to_json() for s in a.labelled] == [s.to_json() for s in b.labelled]


# ---------------------------------------------------------------------------
# Pretraining corpus


def test_pretrain_corpus_shapes():
    seqs, heldout = data.build_pretrain_corpus(3, n_pairs=200, heldout_pairs=20)
    assert sum(len(s.scenes) for s in seqs) == 200
    assert len(heldout) == 20
    for s in seqs[:20]:
        toks = s.tokens
        assert toks[0] == vocab.BOS
        assert toks.count(vocab.EOS) == len(s.segments)
        assert len(s.seg_index) == len(toks)
        assert all(t < vocab.VOCAB_SIZE for t in toks)


def test_pretrain_corpus_mixture_contains_qa():
    seqs, _ = data.build_pretrain_corpus(3, n_pairs=500, heldout_pairs=1)
    kinds = {"qa": 0, "cap": 0}
    for s in seqs:
        for seg in s.segments:
            kinds["qa" if seg[0] == vocab.Q_CUE else "cap"] += 1
    assert kinds["qa"] > 25
    assert kinds["cap"] > 300


def test_jitter_scales_globally():
    img = data.render(data.random_scene(5))
    rng = Rng(9)
    out = data.jitter(img, rng)
    ratio = out / img
    assert np.allclose(ratio, ratio.reshape(-1)[0])
    assert 0.9 <= ratio.reshape(-1)[0] <= 1.1
