"""Deterministic synthetic scenes, captions, VQA, splits, and sampling.

Scenes place 1-3 colored shapes on a 4x4 cell grid and rasterize to a 3x8x8
float image (2x2 pixels per cell). Everything is a pure function of scene
content or derived seeds, so images are re-rendered on demand and never stored.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import vocab
from .rng import Rng, derive_seed

GRID = 4
CELL_PX = 2
IMAGE_HW = GRID * CELL_PX
CHANNELS = 3
BACKGROUND = 0.12

PALETTE = {
    "red": (0.90, 0.10, 0.10),
    "green": (0.10, 0.80, 0.10),
    "blue": (0.10, 0.20, 0.90),
    "yellow": (0.90, 0.90, 0.10),
    "orange": (0.95, 0.55, 0.10),
    "purple": (0.55, 0.10, 0.80),
    "pink": (0.95, 0.60, 0.80),
    "brown": (0.55, 0.35, 0.15),
    # shifted palette for the out-of-distribution pool
    "cyan": (0.10, 0.90, 0.90),
    "magenta": (0.90, 0.10, 0.90),
    "lime": (0.60, 0.95, 0.20),
    "teal": (0.10, 0.50, 0.50),
    "navy": (0.05, 0.10, 0.45),
    "maroon": (0.50, 0.05, 0.20),
    "olive": (0.50, 0.50, 0.10),
    "silver": (0.75, 0.78, 0.80),
}

# Per-shape pixel stencil inside a 2x2 cell.
SHAPE_STENCIL = {
    "square": np.array([[1, 1], [1, 1]], dtype=bool),
    "disc": np.array([[1, 0], [0, 1]], dtype=bool),
    "bar": np.array([[1, 1], [0, 0]], dtype=bool),
}

QUADRANTS = ["top left", "top right", "bottom left", "bottom right"]
N_QUESTION_TYPES = 8
N_CLASSES = len(vocab.COLORS)

TASK_CAPTION = "caption"
TASK_CLASSIFY = "classify"
TASK_VQA = "vqa"


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    row: int
    col: int


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple[SceneObject, ...]
    seed: int

    def to_json(self) -> dict:
        return {
            "objects": [[o.shape, o.color, o.row, o.col] for o in self.objects],
            "seed": self.seed,
        }

    @staticmethod
    def from_json(d: dict) -> "SceneSpec":
        objs = tuple(SceneObject(s, c, r, k) for s, c, r, k in d["objects"])
        return SceneSpec(objs, int(d["seed"]))


@dataclass
class Sample:
    id: int
    scene: SceneSpec
    task: str
    text: str
    class_id: int | None = None
    question_type: int | None = None

    @property
    def tokens(self) -> list[int]:
        return vocab.tokenize(self.text)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "scene": self.scene.to_json(),
            "task": self.task,
            "text": self.text,
            "class_id": self.class_id,
            "question_type": self.question_type,
        }

    @staticmethod
    def from_json(d: dict) -> "Sample":
        return Sample(
            id=int(d["id"]),
            scene=SceneSpec.from_json(d["scene"]),
            task=d["task"],
            text=d["text"],
            class_id=d.get("class_id"),
            question_type=d.get("question_type"),
        )


@dataclass
class PoolImage:
    id: int
    scene: SceneSpec

    def to_json(self) -> dict:
        return {"id": self.id, "scene": self.scene.to_json(), "task": "pool", "text": None,
                "class_id": None, "question_type": None}

    @staticmethod
    def from_json(d: dict) -> "PoolImage":
        return PoolImage(id=int(d["id"]), scene=SceneSpec.from_json(d["scene"]))


@dataclass
class SplitSpec:
    labelled: list[Sample]
    pool: list[PoolImage]
    validation: list[Sample]
    test: list[Sample]
    ood_pool: list[PoolImage] = field(default_factory=list)

    def check_disjoint(self) -> None:
        groups = [self.labelled, self.pool, self.validation, self.test, self.ood_pool]
        seen: set[int] = set()
        for group in groups:
            for item in group:
                if item.id in seen:
                    raise ValueError(f"duplicate sample id {item.id} across splits")
                seen.add(item.id)


class TemplateInapplicable(Exception):
    """The question template cannot be instantiated on this scene."""


# ---------------------------------------------------------------------------
# Scene generation and rendering


def random_scene(seed: int, ood: bool = False, n_objects: int | None = None,
                 force_color: str | None = None) -> SceneSpec:
    rng = Rng(seed)
    palette = vocab.OOD_COLORS if ood else vocab.COLORS
    if n_objects is None:
        n_objects = 1 + rng.next_below(3)
    cells = rng.sample_without_replacement(GRID * GRID, n_objects)
    objs = []
    for cell in cells:
        shape = vocab.SHAPES[rng.next_below(len(vocab.SHAPES))]
        color = force_color if force_color else palette[rng.next_below(len(palette))]
        objs.append(SceneObject(shape, color, cell // GRID, cell % GRID))
    objs.sort(key=lambda o: (o.row, o.col))  # raster order
    return SceneSpec(tuple(objs), seed)


def render(scene: SceneSpec) -> np.ndarray:
    """Rasterize to [channels, H, W] float64; same scene -> identical bytes."""
    img = np.full((CHANNELS, IMAGE_HW, IMAGE_HW), BACKGROUND, dtype=np.float64)
    for obj in scene.objects:
        stencil = SHAPE_STENCIL[obj.shape]
        rgb = PALETTE[obj.color]
        r0, c0 = obj.row * CELL_PX, obj.col * CELL_PX
        for ch in range(CHANNELS):
            patch = img[ch, r0 : r0 + CELL_PX, c0 : c0 + CELL_PX]
            patch[stencil] = rgb[ch]
    return img


def jitter(image: np.ndarray, rng: Rng) -> np.ndarray:
    """Training-time augmentation: global brightness scale U[0.9, 1.1]."""
    return image * rng.uniform(0.9, 1.1)


# ---------------------------------------------------------------------------
# Caption grammars


def caption_of(scene: SceneSpec, grammar: str) -> str:
    if grammar == "pretrain_style":
        return " ".join(f"a {o.color} {o.shape}" for o in scene.objects)
    if grammar == "target_style":
        parts = [f"the image shows {len(scene.objects)} objects :"]
        parts += [f"{o.shape} in {o.color}" for o in scene.objects]
        return " ".join(parts)
    raise ValueError(f"unknown grammar {grammar!r}")


# Extra phrasings used only when building the pretraining corpus; they expose
# the full vocabulary in varied arrangements without ever producing the exact
# target-style construction.
def _corpus_variant(scene: SceneSpec, variant: int) -> str:
    if variant == 0:
        return "the image shows " + " ".join(f"a {o.color} {o.shape}" for o in scene.objects)
    if variant == 1:
        return " ".join(f"a {o.shape} in {o.color}" for o in scene.objects)
    if variant == 2:
        body = " ".join(f"a {o.color} {o.shape}" for o in scene.objects)
        return f"{len(scene.objects)} objects : {body}"
    raise ValueError(variant)


# ---------------------------------------------------------------------------
# VQA templates


def _unique_shape_object(scene: SceneSpec) -> SceneObject:
    counts: dict[str, int] = {}
    for o in scene.objects:
        counts[o.shape] = counts.get(o.shape, 0) + 1
    for o in scene.objects:
        if counts[o.shape] == 1:
            return o
    raise TemplateInapplicable("no shape occurs exactly once")


def _unique_color_object(scene: SceneSpec) -> SceneObject:
    counts: dict[str, int] = {}
    for o in scene.objects:
        counts[o.color] = counts.get(o.color, 0) + 1
    for o in scene.objects:
        if counts[o.color] == 1:
            return o
    raise TemplateInapplicable("no color occurs exactly once")


def _quadrant(o: SceneObject) -> str:
    vert = "top" if o.row < GRID // 2 else "bottom"
    horiz = "left" if o.col < GRID // 2 else "right"
    return f"{vert} {horiz}"


def make_vqa(scene: SceneSpec, question_type: int) -> tuple[str, str]:
    """Render (question, answer) strings; raises TemplateInapplicable on a
    scene the template cannot describe unambiguously."""
    if not 0 <= question_type < N_QUESTION_TYPES:
        raise ValueError(f"question_type {question_type} out of range")
    rng = Rng(derive_seed(scene.seed, "vqa", question_type))
    palette = [o.color for o in scene.objects]
    id_palette = vocab.COLORS if scene.objects[0].color in vocab.COLORS else vocab.OOD_COLORS

    if question_type == 0:
        return "how many objects are there", str(len(scene.objects))

    if question_type == 1:
        o = _unique_shape_object(scene)
        return f"what color is the {o.shape}", o.color

    if question_type == 2:
        if rng.next_float() < 0.5:
            o = scene.objects[rng.next_below(len(scene.objects))]
            return f"is there a {o.color} {o.shape}", "yes"
        present = {(o.color, o.shape) for o in scene.objects}
        for _ in range(64):
            c = id_palette[rng.next_below(len(id_palette))]
            s = vocab.SHAPES[rng.next_below(len(vocab.SHAPES))]
            if (c, s) not in present:
                return f"is there a {c} {s}", "no"
        raise TemplateInapplicable("could not find an absent color/shape pair")

    if question_type == 3:
        o = _unique_shape_object(scene)
        return f"where is the {o.shape}", _quadrant(o)

    if question_type == 4:
        o = _unique_color_object(scene)
        return f"what shape is the {o.color} object", o.shape

    if question_type == 5:
        s = vocab.SHAPES[rng.next_below(len(vocab.SHAPES))]
        n = sum(1 for o in scene.objects if o.shape == s)
        return f"how many {s} objects are there", str(n)

    if question_type == 6:
        if rng.next_float() < 0.5:
            c = palette[rng.next_below(len(palette))]
            return f"is there a {c} object", "yes"
        absent = [c for c in id_palette if c not in palette]
        if not absent:
            raise TemplateInapplicable("all colors present")
        return f"is there a {absent[rng.next_below(len(absent))]} object", "no"

    # question_type == 7: color of the unique object in some quadrant
    per_quadrant: dict[str, list[SceneObject]] = {q: [] for q in QUADRANTS}
    for o in scene.objects:
        per_quadrant[_quadrant(o)].append(o)
    for q in QUADRANTS:
        if len(per_quadrant[q]) == 1:
            return f"what color is the object in the {q}", per_quadrant[q][0].color
    raise TemplateInapplicable("no quadrant holds exactly one object")


def vqa_text(question: str, answer: str) -> str:
    return f"Question: {question} Answer: {answer}"


# ---------------------------------------------------------------------------
# Balanced sampling (O per group, then N per group)


def balanced_sample(population: dict, o_per_group: int, n_per_group: int, seed: int) -> list:
    """Two-stage class/question-type balanced draw.

    Stage 1 draws `o_per_group` uniformly without replacement from each group;
    stage 2 draws `n_per_group` from those. Output order is deterministic:
    groups in sorted key order, selections in draw order.
    """
    if n_per_group > o_per_group:
        raise ValueError(f"N={n_per_group} exceeds O={o_per_group}")
    out = []
    for key in sorted(population):
        items = population[key]
        if len(items) < o_per_group:
            raise ValueError(
                f"group {key!r} has {len(items)} samples, needs at least {o_per_group}"
            )
        rng = Rng(derive_seed(seed, "balanced", str(key)))
        stage1 = [items[i] for i in rng.sample_without_replacement(len(items), o_per_group)]
        stage2 = [stage1[i] for i in rng.sample_without_replacement(o_per_group, n_per_group)]
        out.extend(stage2)
    return out


# ---------------------------------------------------------------------------
# Split construction


class _SampleFactory:
    """Hands out samples with globally unique ids, all seeded from the root."""

    def __init__(self, root_seed: int):
        self.root = root_seed
        self._next_id = 0

    def _take_id(self) -> int:
        i = self._next_id
        self._next_id += 1
        return i

    def _scene(self, sid: int, attempt: int = 0, **kw) -> SceneSpec:
        return random_scene(derive_seed(self.root, "scene", sid, attempt), **kw)

    def caption_sample(self, grammar: str = "target_style") -> Sample:
        sid = self._take_id()
        scene = self._scene(sid)
        return Sample(sid, scene, TASK_CAPTION, caption_of(scene, grammar))

    def classify_sample(self, class_id: int | None = None) -> Sample:
        sid = self._take_id()
        if class_id is None:
            class_id = Rng(derive_seed(self.root, "class", sid)).next_below(N_CLASSES)
        color = vocab.COLORS[class_id]
        scene = self._scene(sid, n_objects=1, force_color=color)
        return Sample(sid, scene, TASK_CLASSIFY, color, class_id=class_id)

    def vqa_sample(self, question_type: int | None = None) -> Sample:
        sid = self._take_id()
        if question_type is None:
            question_type = Rng(derive_seed(self.root, "qtype", sid)).next_below(N_QUESTION_TYPES)
        for attempt in range(64):
            scene = self._scene(sid, attempt)
            try:
                q, a = make_vqa(scene, question_type)
            except TemplateInapplicable:
                continue
            return Sample(sid, scene, TASK_VQA, vqa_text(q, a), question_type=question_type)
        raise RuntimeError(f"no applicable scene found for question type {question_type}")

    def pool_image(self, ood: bool = False) -> PoolImage:
        sid = self._take_id()
        return PoolImage(sid, self._scene(sid, ood=ood))


def make_splits(task: str, root_seed: int, n_labelled: int, pool_size: int = 500,
                val_size: int = 200, test_size: int = 200, ood_pool_size: int = 0,
                o_per_group: int = 25) -> SplitSpec:
    """Build disjoint labelled/pool/validation/test splits for one task.

    For classification and VQA, `n_labelled` is per class / per question type
    and both the labelled set and the validation set are group-balanced; the
    test split stays unbalanced.
    """
    factory = _SampleFactory(root_seed)

    if task == TASK_CAPTION:
        test = [factory.caption_sample() for _ in range(test_size)]
        validation = [factory.caption_sample() for _ in range(val_size)]
        pool = [factory.pool_image() for _ in range(pool_size)]
        reservoir = {"all": [factory.caption_sample() for _ in range(max(o_per_group, n_labelled) * 2)]}
        labelled = balanced_sample(reservoir, max(o_per_group, n_labelled), n_labelled,
                                   derive_seed(root_seed, "labelled"))
    elif task == TASK_CLASSIFY:
        test = [factory.classify_sample() for _ in range(test_size)]
        per_group_val = val_size // N_CLASSES
        validation = [factory.classify_sample(c) for c in range(N_CLASSES) for _ in range(per_group_val)]
        pool = [factory.pool_image() for _ in range(pool_size)]
        reservoir = {c: [factory.classify_sample(c) for _ in range(max(o_per_group, n_labelled) * 2)]
                     for c in range(N_CLASSES)}
        labelled = balanced_sample(reservoir, max(o_per_group, n_labelled), n_labelled,
                                   derive_seed(root_seed, "labelled"))
    elif task == TASK_VQA:
        test = [factory.vqa_sample() for _ in range(test_size)]
        per_group_val = val_size // N_QUESTION_TYPES
        validation = [factory.vqa_sample(t) for t in range(N_QUESTION_TYPES) for _ in range(per_group_val)]
        pool = [factory.pool_image() for _ in range(pool_size)]
        reservoir = {t: [factory.vqa_sample(t) for _ in range(max(o_per_group, n_labelled) * 2)]
                     for t in range(N_QUESTION_TYPES)}
        labelled = balanced_sample(reservoir, max(o_per_group, n_labelled), n_labelled,
                                   derive_seed(root_seed, "labelled"))
    else:
        raise ValueError(f"unknown task {task!r}")

    ood_pool = [factory.pool_image(ood=True) for _ in range(ood_pool_size)]
    split = SplitSpec(labelled=labelled, pool=pool, validation=validation, test=test,
                      ood_pool=ood_pool)
    split.check_disjoint()
    return split


# ---------------------------------------------------------------------------
# Pretraining corpus (the "web data" stand-in)


@dataclass
class PretrainSequence:
    """An interleaved sequence of (scene, segment tokens) pairs."""
    scenes: list[SceneSpec]
    segments: list[list[int]]  # per-segment token ids: cue ... EOS

    @property
    def tokens(self) -> list[int]:
        out = [vocab.BOS]
        for seg in self.segments:
            out.extend(seg)
        return out

    @property
    def seg_index(self) -> list[int]:
        out = [0]
        for i, seg in enumerate(self.segments):
            out.extend([i] * len(seg))
        return out


def _caption_segment(text: str) -> list[int]:
    return [vocab.O_CUE] + vocab.tokenize(text)[1:-1] + [vocab.EOS]


def _qa_segment(question: str, answer: str) -> list[int]:
    q = vocab.tokenize(question)[1:-1]
    a = vocab.tokenize(answer)[1:-1]
    return [vocab.Q_CUE] + q + [vocab.A_CUE] + a + [vocab.EOS]


# Pretraining mixture: mostly plain pretrain-style captions, a slice of
# reworded variants covering the rest of the vocabulary, and some QA pairs
# restricted to the first half of the question types.
CAPTION_FRACTION = 0.70
VARIANT_FRACTIONS = (0.075, 0.0375, 0.0375)
QA_TYPES_IN_PRETRAIN = (0, 1, 2, 3)


def _pretrain_pair(root_seed: int, pair_id: int) -> tuple[SceneSpec, list[int]]:
    rng = Rng(derive_seed(root_seed, "pretrain", pair_id))
    u = rng.next_float()
    if u < CAPTION_FRACTION:
        scene = random_scene(derive_seed(root_seed, "pscene", pair_id))
        return scene, _caption_segment(caption_of(scene, "pretrain_style"))
    u -= CAPTION_FRACTION
    for variant, frac in enumerate(VARIANT_FRACTIONS):
        if u < frac:
            scene = random_scene(derive_seed(root_seed, "pscene", pair_id))
            return scene, _caption_segment(_corpus_variant(scene, variant))
        u -= frac
    qtype = QA_TYPES_IN_PRETRAIN[rng.next_below(len(QA_TYPES_IN_PRETRAIN))]
    for attempt in range(64):
        scene = random_scene(derive_seed(root_seed, "pscene", pair_id, attempt))
        try:
            q, a = make_vqa(scene, qtype)
        except TemplateInapplicable:
            continue
        return scene, _qa_segment(q, a)
    raise RuntimeError("could not instantiate pretraining QA pair")


def build_pretrain_corpus(root_seed: int, n_pairs: int = 20000,
                          heldout_pairs: int = 500) -> tuple[list[PretrainSequence], list[Sample]]:
    """Training sequences (interleaved, 1-4 pairs each) plus a held-out set of
    single pretrain-style caption pairs for the convergence gate."""
    rng = Rng(derive_seed(root_seed, "pretrain-grouping"))
    sequences = []
    pair_id = 0
    while pair_id < n_pairs:
        k = min(1 + rng.next_below(4), n_pairs - pair_id)
        scenes, segments = [], []
        for _ in range(k):
            scene, seg = _pretrain_pair(root_seed, pair_id)
            scenes.append(scene)
            segments.append(seg)
            pair_id += 1
        sequences.append(PretrainSequence(scenes, segments))

    heldout = []
    for j in range(heldout_pairs):
        scene = random_scene(derive_seed(root_seed, "pretrain-heldout", j))
        heldout.append(Sample(10_000_000 + j, scene, TASK_CAPTION,
                              caption_of(scene, "pretrain_style")))
    return sequences, heldout


# ---------------------------------------------------------------------------
# JSON-lines persistence


def save_split(path: str | Path, split: SplitSpec) -> None:
    """One JSONL file per split under `path` (a directory)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    files = {
        "labelled": split.labelled,
        "validation": split.validation,
        "test": split.test,
        "pool": split.pool,
        "ood_pool": split.ood_pool,
    }
    for name, items in files.items():
        with open(path / f"{name}.jsonl", "w") as fh:
            for item in items:
                fh.write(json.dumps(item.to_json(), sort_keys=True) + "\n")


def load_split(path: str | Path) -> SplitSpec:
    path = Path(path)

    def read(name, cls):
        fp = path / f"{name}.jsonl"
        if not fp.exists():
            return []
        with open(fp) as fh:
            return [cls.from_json(json.loads(line)) for line in fh if line.strip()]

    split = SplitSpec(
        labelled=read("labelled", Sample),
        pool=read("pool", PoolImage),
        validation=read("validation", Sample),
        test=read("test", Sample),
        ood_pool=read("ood_pool", PoolImage),
    )
    split.check_disjoint()
    return split
