"""Synthetic multimodal world with a ground-truth translation oracle.

A scene is 1-3 objects, each a (shape, color, position) triple with
distinct positions, kept in canonical position order.  Scenes render to

* a source-language sentence, per object ``COLOR SHAPE POSITION`` joined by
  ``und``;
* a target-language sentence, per object ``POSITION SHAPE COLOR`` joined by
  ``and``;
* a noisy ``L x D`` feature grid where each object deposits a Gaussian bump
  at its position cell, carrying a one-hot shape code in channels 0-6 and a
  one-hot color code in channels 8-14 (channels 7 and 15 flag objectness).

The two word inventories are disjoint, so translation is word mapping plus
reordering inside every object phrase.
"""

from __future__ import annotations

import itertools
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .seqmodels import EOS, Vocab

GRAMMAR_VERSION = 1

SHAPES = 7
COLORS = 7
GRID_SIDE = 4
LOCATIONS = GRID_SIDE * GRID_SIDE
FEATURE_DIM = 16
POSITION_CELLS = ((0, 0), (0, 3), (3, 0), (3, 3))
POSITIONS = len(POSITION_CELLS)
MAX_OBJECTS = 3
BUMP_WIDTH = 0.7

SRC_COLORS = ("rot", "gruen", "blau", "gelb", "schwarz", "weiss", "lila")
SRC_SHAPES = ("kreis", "quadrat", "dreieck", "stern", "herz", "ring", "kreuz")
SRC_POSITIONS = ("obenlinks", "obenrechts", "untenlinks", "untenrechts")
SRC_JOIN = "und"

TGT_COLORS = ("red", "green", "blue", "yellow", "black", "white", "purple")
TGT_SHAPES = ("circle", "square", "triangle", "star", "heart", "hoop", "cross")
TGT_POSITIONS = ("topleft", "topright", "bottomleft", "bottomright")
TGT_JOIN = "and"

SOURCE_VOCAB = Vocab(SRC_COLORS + SRC_SHAPES + SRC_POSITIONS + (SRC_JOIN,))
TARGET_VOCAB = Vocab(TGT_COLORS + TGT_SHAPES + TGT_POSITIONS + (TGT_JOIN,))

# Noise scale below which nearest-centroid decoding of a position cell is
# exact with overwhelming probability: the closest pair of cell codes is
# sqrt(2) apart, and per-cell noise norm is about sigma * sqrt(D).
SEPARABLE_NOISE = 0.1

SOURCE, TARGET = "source", "target"


class ParseError(ValueError):
    """A sentence is not generated by the grammar."""

    def __init__(self, message: str, position: int):
        self.position = position
        super().__init__(f"{message} at token {position}")


@dataclass(frozen=True)
class Obj:
    shape: int
    color: int
    position: int


@dataclass(frozen=True)
class Scene:
    objects: tuple[Obj, ...]

    def __post_init__(self):
        if not 1 <= len(self.objects) <= MAX_OBJECTS:
            raise ValueError("a scene holds 1 to 3 objects")
        for o in self.objects:
            if not (0 <= o.shape < SHAPES and 0 <= o.color < COLORS and 0 <= o.position < POSITIONS):
                raise ValueError(f"attribute out of range: {o}")
        pos = [o.position for o in self.objects]
        if pos != sorted(set(pos)):
            raise ValueError("object positions must be distinct and in canonical order")


@dataclass(eq=False)
class Document:
    image_id: int
    features: np.ndarray
    text: tuple[int, ...]
    language: str

    def __eq__(self, other):
        return (isinstance(other, Document) and self.image_id == other.image_id
                and self.language == other.language and self.text == other.text
                and np.array_equal(self.features, other.features))


@dataclass
class CorpusSplit:
    D_zx: list[Document]
    D_zy: list[Document]
    D_zx_val: list[Document]
    D_zy_val: list[Document]
    test_pairs: list[tuple[tuple[int, ...], tuple[int, ...]]]
    noise_sigma: float = 0.0
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __eq__(self, other):
        return (isinstance(other, CorpusSplit)
                and all(getattr(self, k) == getattr(other, k)
                        for k in ("D_zx", "D_zy", "D_zx_val", "D_zy_val", "test_pairs"))
                and self.noise_sigma == other.noise_sigma)

    def parallel_pairs(self) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
        """Ground-truth source/target pairs for the images of ``D_zy``.

        Only the ORACLE comparison uses these; the served size equals
        ``len(D_zy)`` so the comparison is at equal data scale.
        """
        return self.meta["oracle_pairs"]


# ---------------------------------------------------------------- scenes


def scene_space_size() -> int:
    return sum(math.comb(POSITIONS, n) * (SHAPES * COLORS) ** n for n in range(1, MAX_OBJECTS + 1))


def generate_scene(rng: np.random.Generator) -> Scene:
    """Draw uniformly from the finite scene space."""
    weights = np.array([math.comb(POSITIONS, n) * (SHAPES * COLORS) ** n
                        for n in range(1, MAX_OBJECTS + 1)], dtype=float)
    n = int(rng.choice(np.arange(1, MAX_OBJECTS + 1), p=weights / weights.sum()))
    positions = sorted(rng.choice(POSITIONS, size=n, replace=False).tolist())
    return Scene(tuple(Obj(int(rng.integers(SHAPES)), int(rng.integers(COLORS)), p) for p in positions))


def all_scenes():
    """Iterate the whole scene space in a fixed order."""
    attrs = [(s, c) for s in range(SHAPES) for c in range(COLORS)]
    for n in range(1, MAX_OBJECTS + 1):
        for positions in itertools.combinations(range(POSITIONS), n):
            for combo in itertools.product(attrs, repeat=n):
                yield Scene(tuple(Obj(s, c, p) for (s, c), p in zip(combo, positions)))


# ---------------------------------------------------------------- languages


def source_words(scene: Scene) -> list[str]:
    words: list[str] = []
    for i, o in enumerate(scene.objects):
        if i:
            words.append(SRC_JOIN)
        words += [SRC_COLORS[o.color], SRC_SHAPES[o.shape], SRC_POSITIONS[o.position]]
    return words


def target_words(scene: Scene) -> list[str]:
    words: list[str] = []
    for i, o in enumerate(scene.objects):
        if i:
            words.append(TGT_JOIN)
        words += [TGT_POSITIONS[o.position], TGT_SHAPES[o.shape], TGT_COLORS[o.color]]
    return words


def render_source(scene: Scene) -> tuple[int, ...]:
    return SOURCE_VOCAB.encode(source_words(scene))


def render_target(scene: Scene) -> tuple[int, ...]:
    return TARGET_VOCAB.encode(target_words(scene))


def _parse(tokens, vocab: Vocab, slots, join: str) -> Scene:
    """Parse ``phrase (join phrase)* EOS`` where ``slots`` names each phrase slot."""
    tokens = tuple(tokens)
    tables = [{vocab.stoi[w]: i for i, w in enumerate(words)} for _, words in slots]
    join_id = vocab.stoi[join]
    objects = []
    i = 0
    while True:
        values = {}
        for (name, _), table in zip(slots, tables):
            if i >= len(tokens) or tokens[i] not in table:
                raise ParseError(f"expected a {name} word", i)
            values[name] = table[tokens[i]]
            i += 1
        obj = Obj(values["shape"], values["color"], values["position"])
        if objects and obj.position <= objects[-1].position:
            raise ParseError("positions out of canonical order", i - (3 - [n for n, _ in slots].index("position")))
        objects.append(obj)
        if i < len(tokens) and tokens[i] == join_id:
            if len(objects) == MAX_OBJECTS:
                raise ParseError("too many objects", i)
            i += 1
            continue
        break
    if i >= len(tokens) or tokens[i] != EOS:
        raise ParseError("expected end of sentence", i)
    if i != len(tokens) - 1:
        raise ParseError("tokens after end of sentence", i + 1)
    return Scene(tuple(objects))


def parse_source(tokens) -> Scene:
    return _parse(tokens, SOURCE_VOCAB,
                  [("color", SRC_COLORS), ("shape", SRC_SHAPES), ("position", SRC_POSITIONS)], SRC_JOIN)


def parse_target(tokens) -> Scene:
    return _parse(tokens, TARGET_VOCAB,
                  [("position", TGT_POSITIONS), ("shape", TGT_SHAPES), ("color", TGT_COLORS)], TGT_JOIN)


def oracle_translate(x) -> tuple[int, ...]:
    """Ground-truth translation of a valid source sentence."""
    return render_target(parse_source(x))


# ---------------------------------------------------------------- images


def _cell_coords() -> np.ndarray:
    return np.array([(r, c) for r in range(GRID_SIDE) for c in range(GRID_SIDE)], dtype=float)


_CELLS = _cell_coords()
_BUMPS = np.stack([np.exp(-((_CELLS - np.array(rc, dtype=float)) ** 2).sum(1) / (2 * BUMP_WIDTH ** 2))
                   for rc in POSITION_CELLS])  # [POSITIONS, L]


def object_code(shape: int, color: int) -> np.ndarray:
    code = np.zeros(FEATURE_DIM)
    code[shape] = 1.0
    code[7] = 1.0
    code[8 + color] = 1.0
    code[15] = 1.0
    return code


def render_clean(scene: Scene) -> np.ndarray:
    grid = np.zeros((LOCATIONS, FEATURE_DIM))
    for o in scene.objects:
        grid += np.outer(_BUMPS[o.position], object_code(o.shape, o.color))
    return grid


def render_image(scene: Scene, rng: np.random.Generator, noise_sigma: float) -> np.ndarray:
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    grid = render_clean(scene)
    if noise_sigma > 0:
        grid = grid + rng.normal(0.0, noise_sigma, size=grid.shape)
    return grid


def decode_image(grid: np.ndarray) -> Scene:
    """Nearest-centroid recovery of a scene from a feature grid.

    Each position cell is classified independently against the
    empty-cell centroid and the 49 attribute centroids.
    """
    centroids = [np.zeros(FEATURE_DIM)] + [object_code(s, c) for s in range(SHAPES) for c in range(COLORS)]
    centroids = np.stack(centroids)
    cell_index = [r * GRID_SIDE + c for r, c in POSITION_CELLS]
    objects = []
    for p, idx in enumerate(cell_index):
        d = ((centroids - grid[idx]) ** 2).sum(1)
        k = int(np.argmin(d))
        if k:
            s, c = divmod(k - 1, COLORS)
            objects.append(Obj(s, c, p))
    return Scene(tuple(objects))


# ---------------------------------------------------------------- splits


def _fresh_scenes(rng, n: int, exclude: set) -> list[Scene]:
    out = []
    while len(out) < n:
        s = generate_scene(rng)
        if s not in exclude:
            out.append(s)
    return out


def make_splits(n_per_side: int, seed: int, noise_sigma: float = 0.3,
                n_val: int | None = None, n_test: int | None = None) -> CorpusSplit:
    """Build the disjoint zero-resource splits.

    Training images split in half: the first half keeps only its source
    text (``D_zx``), the second only its target text (``D_zy``).  Validation
    images are split the same way.  Test pairs come from scenes that never
    occur in training or validation.
    """
    if n_per_side < 1:
        raise ValueError("n_per_side must be >= 1")
    n_val = max(1, n_per_side // 5) if n_val is None else n_val
    n_test = max(1, n_per_side // 2) if n_test is None else n_test
    scene_rng, noise_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    train = [generate_scene(scene_rng) for _ in range(2 * n_per_side)]
    val = [generate_scene(scene_rng) for _ in range(2 * n_val)]
    test = _fresh_scenes(scene_rng, n_test, set(train) | set(val))

    image_id = itertools.count()

    def docs(scenes, lang):
        render = render_source if lang == SOURCE else render_target
        return [Document(next(image_id), render_image(s, noise_rng, noise_sigma), render(s), lang) for s in scenes]

    split = CorpusSplit(
        D_zx=docs(train[:n_per_side], SOURCE),
        D_zy=docs(train[n_per_side:], TARGET),
        D_zx_val=docs(val[:n_val], SOURCE),
        D_zy_val=docs(val[n_val:], TARGET),
        test_pairs=[(render_source(s), render_target(s)) for s in test],
        noise_sigma=float(noise_sigma),
        seed=int(seed),
    )
    split.meta["oracle_pairs"] = [(render_source(s), render_target(s)) for s in train[n_per_side:]]
    return split


# ---------------------------------------------------------------- files
#
# A corpus directory holds vocab_src.txt, vocab_tgt.txt, one file per
# document list (D_zx.tsv, D_zy.tsv, D_zx_val.tsv, D_zy_val.tsv), test.tsv and
# oracle_pairs.tsv.  Document files start with a header line
#   # commgame-corpus v1 L=<L> D=<D> grammar=<version> noise_sigma=<repr> seed=<int>
# followed by one record per line with tab-separated fields:
#   image_id, language, space-separated words, space-separated L*D feature
#   values in row-major order (repr floats, exact round trip).
# Pair files hold "source words <TAB> target words" per line.

DOC_FILES = ("D_zx", "D_zy", "D_zx_val", "D_zy_val")


def _header(split: CorpusSplit) -> str:
    return (f"# commgame-corpus v1 L={LOCATIONS} D={FEATURE_DIM} grammar={GRAMMAR_VERSION} "
            f"noise_sigma={split.noise_sigma!r} seed={split.seed}\n")


def _vocab_for(lang: str) -> Vocab:
    return SOURCE_VOCAB if lang == SOURCE else TARGET_VOCAB


def save_corpus(split: CorpusSplit, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    SOURCE_VOCAB.save(os.path.join(directory, "vocab_src.txt"))
    TARGET_VOCAB.save(os.path.join(directory, "vocab_tgt.txt"))
    for name in DOC_FILES:
        with open(os.path.join(directory, f"{name}.tsv"), "w", encoding="utf-8") as f:
            f.write(_header(split))
            for d in getattr(split, name):
                words = " ".join(_vocab_for(d.language).decode(d.text))
                feats = " ".join(repr(float(v)) for v in d.features.reshape(-1))
                f.write(f"{d.image_id}\t{d.language}\t{words}\t{feats}\n")
    for name, pairs in (("test", split.test_pairs), ("oracle_pairs", split.meta.get("oracle_pairs", []))):
        with open(os.path.join(directory, f"{name}.tsv"), "w", encoding="utf-8") as f:
            for x, y in pairs:
                f.write(" ".join(SOURCE_VOCAB.decode(x)) + "\t" + " ".join(TARGET_VOCAB.decode(y)) + "\n")


def _parse_header(line: str) -> dict:
    if not line.startswith("# commgame-corpus v1"):
        raise ValueError("not a corpus file")
    fields = dict(tok.split("=", 1) for tok in line.split()[3:])
    return fields


def load_documents(path) -> tuple[list[Document], dict]:
    with open(path, encoding="utf-8") as f:
        header = _parse_header(f.readline().strip())
        L, D = int(header["L"]), int(header["D"])
        docs = []
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            image_id, lang, words, feats = line.split("\t")
            values = np.array([float(v) for v in feats.split()]).reshape(L, D)
            docs.append(Document(int(image_id), values, _vocab_for(lang).encode(words.split()), lang))
    return docs, header


def _load_pairs(path):
    pairs = []
    if not os.path.exists(path):
        return pairs
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if line:
                x, y = line.split("\t")
                pairs.append((SOURCE_VOCAB.encode(x.split()), TARGET_VOCAB.encode(y.split())))
    return pairs


def load_corpus(directory) -> CorpusSplit:
    lists = {}
    header = {}
    for name in DOC_FILES:
        lists[name], header = load_documents(os.path.join(directory, f"{name}.tsv"))
    if int(header["grammar"]) != GRAMMAR_VERSION:
        raise ValueError(f"grammar version {header['grammar']} not supported")
    split = CorpusSplit(test_pairs=_load_pairs(os.path.join(directory, "test.tsv")),
                        noise_sigma=float(header["noise_sigma"]), seed=int(header["seed"]), **lists)
    split.meta["oracle_pairs"] = _load_pairs(os.path.join(directory, "oracle_pairs.tsv"))
    return split
