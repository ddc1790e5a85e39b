"""Grid-world visual dialogues: generation, vocabulary and file IO.

Each image holds 1-4 coloured shapes on a 3x3 grid.  A region feature is
the exact attribute encoding of one object (one-hot shape, one-hot colour,
normalised row/column), so every templated question is answerable from the
image features alone.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

SCHEMA = "dam-visdial/1"

PAD, START, END, UNK = "<pad>", "<start>", "<end>", "<unk>"
SPECIALS = (PAD, START, END, UNK)
PAD_ID, START_ID, END_ID, UNK_ID = range(4)

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "blue", "green", "yellow")
ROWS = ("top", "middle", "bottom")
COLS = ("left", "center", "right")
NUMBERS = ("zero", "one", "two", "three", "four")
REGION_DIM = len(SHAPES) + len(COLORS) + 2

_NOISE_ANSWERS = (
    ("i", "can", "not", "tell"),
    ("maybe",),
    ("not", "sure"),
    ("hard", "to", "say"),
    ("i", "do", "not", "know"),
    ("can", "not", "see"),
    ("it", "is", "too", "dark"),
    ("the", "picture", "is", "blurry"),
    ("sorry", ",", "i", "can", "not", "say"),
    ("possibly",),
)
_TOKEN_RE = re.compile(r"[a-z0-9]+(?:'[a-z]+)?|[^\sa-z0-9]")


class DatasetError(ValueError):
    """Malformed or incompatible dataset file."""


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def detokenize(tokens: Sequence[str]) -> str:
    return " ".join(tokens)


# ---------------------------------------------------------------------------
# dataset types


@dataclass
class Image:
    id: int
    regions: list[list[float]]
    captions: list[list[str]]

    def objects(self) -> list[tuple[str, str, int, int]]:
        """Decode (shape, colour, row, col) back out of the region features."""
        out = []
        for r in self.regions:
            shape = SHAPES[int(np.argmax(r[:3]))]
            color = COLORS[int(np.argmax(r[3:7]))]
            out.append((shape, color, round(r[7] * 2), round(r[8] * 2)))
        return out


@dataclass
class Round:
    question: list[str]
    answer: list[str]
    candidates: list[list[str]]
    relevance: list[float]
    gt_index: int


@dataclass
class Dialogue:
    image_id: int
    caption: list[str]
    rounds: list[Round]


@dataclass
class Dataset:
    images: list[Image]
    dialogues: list[Dialogue]
    _by_id: dict[int, Image] = field(default=None, init=False, repr=False, compare=False)

    def image(self, image_id: int) -> Image:
        if self._by_id is None:
            self._by_id = {im.id: im for im in self.images}
        return self._by_id[image_id]

    def examples(self) -> list["Example"]:
        """Flatten into one example per round, history accumulated per dialogue."""
        out = []
        for d_idx, dlg in enumerate(self.dialogues):
            image = self.image(dlg.image_id)
            history = [list(dlg.caption)]
            for r_idx, rnd in enumerate(dlg.rounds):
                out.append(Example(d_idx, r_idx, image, list(history), rnd))
                history.append(rnd.question + rnd.answer)
        return out

    def tokens(self) -> Iterator[str]:
        for im in self.images:
            for cap in im.captions:
                yield from cap
        for dlg in self.dialogues:
            yield from dlg.caption
            for rnd in dlg.rounds:
                yield from rnd.question
                yield from rnd.answer
                for cand in rnd.candidates:
                    yield from cand


@dataclass
class Example:
    """One dialogue round with everything an encoder sees."""

    dialogue: int
    round: int
    image: Image
    history: list[list[str]]
    rnd: Round

    @property
    def question(self) -> list[str]:
        return self.rnd.question

    @property
    def answer(self) -> list[str]:
        return self.rnd.answer


# ---------------------------------------------------------------------------
# vocabulary


class Vocabulary:
    def __init__(self, tokens: Sequence[str], min_freq: int = 0):
        self.min_freq = min_freq
        self.itos: list[str] = list(SPECIALS) + [t for t in tokens if t not in SPECIALS]
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def to_json(self) -> dict:
        return {"min_freq": self.min_freq, "tokens": self.itos[len(SPECIALS) :]}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        return cls(obj["tokens"], obj.get("min_freq", 0))


def build_vocab(dataset: Dataset, min_freq: int = 0) -> Vocabulary:
    """Keep tokens seen strictly more than ``min_freq`` times.

    Ids follow descending frequency, ties broken lexicographically.
    """
    counts = Counter(dataset.tokens())
    if not counts:
        raise ValueError("build_vocab: dataset has no tokens")
    kept = sorted((t for t, c in counts.items() if c > min_freq), key=lambda t: (-counts[t], t))
    return Vocabulary(kept, min_freq)


# ---------------------------------------------------------------------------
# generation


def _plural(shape: str) -> str:
    return shape + "s"


def _answer_forms(kind: str, value: str) -> tuple[list[str], list[str]]:
    """Short and long surface forms of one answer; the long form leads with the short one."""
    if kind == "exist":
        return [value], [value, ",", "there", "is"] + ([] if value == "yes" else ["not"])
    if kind == "color":
        return [value], [value, ",", "i", "think"]
    return [value], [value, "in", "total"]


def _all_answer_forms() -> list[tuple[str, str, int, list[str]]]:
    """Every candidate answer as (kind, value, form index, tokens)."""
    out = []
    for kind, values in (("exist", ("yes", "no")), ("color", COLORS), ("count", NUMBERS[1:])):
        for v in values:
            out += [(kind, v, i, f) for i, f in enumerate(_answer_forms(kind, v))]
    out += [("noise", "", 0, list(f)) for f in _NOISE_ANSWERS]
    return out


def _captions(objects) -> list[list[str]]:
    n = len(objects)
    noun = "object" if n == 1 else "objects"
    caps = [["an", "image", "with", NUMBERS[n], noun]]
    for shape, color, row, col in objects[:2]:
        caps.append(["a", color, shape, "at", "the", ROWS[row], COLS[col]])
    return caps


def _questions(objects) -> list[tuple[list[str], str, str]]:
    counts = Counter(o[0] for o in objects)
    pool = []
    for shape in SHAPES:
        pool.append((["is", "there", "a", shape, "?"], "exist", "yes" if counts[shape] else "no"))
    for shape in SHAPES:
        if counts[shape] == 1:
            color = next(o[1] for o in objects if o[0] == shape)
            pool.append((["what", "color", "is", "the", shape, "?"], "color", color))
    for shape in SHAPES:
        if counts[shape]:
            pool.append((["how", "many", _plural(shape), "are", "there", "?"], "count", NUMBERS[counts[shape]]))
    return pool


def generate_dataset(seed: int, n_images: int, rounds_per_dialogue: int, n_candidates: int) -> Dataset:
    """Deterministic micro visual-dialogue corpus, one dialogue per image.

    Each round's ground-truth answer takes a short or long surface form at
    random; the other form is added as a candidate with relevance 0.5 and
    the remaining candidates are relevance-0 distractors: every other
    answer value in the paraphrase's wording, topped up with non-committal
    answers.  No distractor is closer in wording to the ground truth than
    the paraphrase is.
    """
    if n_candidates < 2:
        raise ValueError("generate_dataset: need at least 2 candidates")
    if rounds_per_dialogue < 1:
        raise ValueError("generate_dataset: need at least 1 round")
    if n_images < 1:
        raise ValueError("generate_dataset: need at least 1 image")
    rng = np.random.default_rng(seed)
    all_forms = _all_answer_forms()
    images, dialogues = [], []
    for image_id in range(n_images):
        n_obj = int(rng.integers(1, 5))
        cells = rng.choice(9, size=n_obj, replace=False)
        objects = []
        for cell in cells:
            objects.append((SHAPES[rng.integers(3)], COLORS[rng.integers(4)], int(cell) // 3, int(cell) % 3))
        regions = []
        for shape, color, row, col in objects:
            vec = [0.0] * REGION_DIM
            vec[SHAPES.index(shape)] = 1.0
            vec[3 + COLORS.index(color)] = 1.0
            vec[7], vec[8] = row / 2, col / 2
            regions.append(vec)
        captions = _captions(objects)
        images.append(Image(image_id, regions, captions))

        pool = _questions(objects)
        if len(pool) < rounds_per_dialogue:
            raise ValueError(
                f"generate_dataset: template pool exhausted, image {image_id} supports "
                f"{len(pool)} questions but {rounds_per_dialogue} rounds were requested"
            )
        picks = rng.choice(len(pool), size=rounds_per_dialogue, replace=False)
        rounds = []
        for p in picks:
            question, kind, value = pool[int(p)]
            forms = _answer_forms(kind, value)
            gt_form = int(rng.random() >= 0.5)
            gt, para = forms[gt_form], forms[1 - gt_form]
            distract = [f for k, v, i, f in all_forms if k == "noise" or ((k, v) != (kind, value) and i != gt_form)]
            n_distract = n_candidates - 2
            if n_distract > len(distract):
                raise ValueError(
                    f"generate_dataset: template pool exhausted, only {len(distract) + 2} candidates available"
                )
            chosen = [distract[int(i)] for i in rng.choice(len(distract), size=n_distract, replace=False)]
            cands = [(gt, 1.0), (para, 0.5)] + [(c, 0.0) for c in chosen]
            order = rng.permutation(len(cands))
            cands = [cands[int(i)] for i in order]
            gt_index = int(np.flatnonzero(order == 0)[0])
            rounds.append(Round(question, gt, [c for c, _ in cands], [r for _, r in cands], gt_index))
        dialogues.append(Dialogue(image_id, list(captions[0]), rounds))
    return Dataset(images, dialogues)


def answer_is_consistent(image: Image, question: Sequence[str], answer: Sequence[str]) -> bool:
    """Check an answer (either surface form) against the image contents."""
    expected = {tuple(q): (k, v) for q, k, v in _questions(image.objects())}
    if tuple(question) not in expected:
        return False
    kind, value = expected[tuple(question)]
    return list(answer) in _answer_forms(kind, value)


# ---------------------------------------------------------------------------
# file IO


def dataset_to_json(ds: Dataset) -> dict:
    return {
        "schema": SCHEMA,
        "images": [{"id": im.id, "regions": im.regions, "captions": im.captions} for im in ds.images],
        "dialogues": [
            {
                "image_id": d.image_id,
                "caption": d.caption,
                "rounds": [
                    {
                        "question": r.question,
                        "answer": r.answer,
                        "candidates": r.candidates,
                        "relevance": r.relevance,
                        "gt_index": r.gt_index,
                    }
                    for r in d.rounds
                ],
            }
            for d in ds.dialogues
        ],
    }


def save_dataset(ds: Dataset, path: str | Path, config: dict | None = None) -> None:
    """Write ``ds`` as JSON; ``config`` (the generating run's settings) is stored alongside."""
    obj = dataset_to_json(ds)
    if config is not None:
        obj["config"] = config
    text = json.dumps(obj, indent=1)
    Path(path).write_text(text + "\n", encoding="utf-8")


def _field(obj: dict, key: str, where: str):
    if not isinstance(obj, dict):
        raise DatasetError(f"{where}: expected an object")
    if key not in obj:
        raise DatasetError(f"{where}: missing field {key!r}")
    return obj[key]


def dataset_from_json(obj: dict) -> Dataset:
    schema = _field(obj, "schema", "dataset")
    if schema != SCHEMA:
        raise DatasetError(f"dataset: unsupported schema {schema!r} (expected {SCHEMA!r})")
    images = []
    for i, im in enumerate(_field(obj, "images", "dataset")):
        where = f"images[{i}]"
        regions = _field(im, "regions", where)
        if not regions:
            raise DatasetError(f"{where}.regions: empty")
        images.append(Image(int(_field(im, "id", where)), regions, _field(im, "captions", where)))
    dialogues = []
    for i, d in enumerate(_field(obj, "dialogues", "dataset")):
        where = f"dialogues[{i}]"
        rounds = []
        for j, r in enumerate(_field(d, "rounds", where)):
            rw = f"{where}.rounds[{j}]"
            cands = _field(r, "candidates", rw)
            rel = _field(r, "relevance", rw)
            gt = _field(r, "gt_index", rw)
            if len(rel) != len(cands):
                raise DatasetError(f"{rw}.relevance: length {len(rel)} != {len(cands)} candidates")
            if not 0 <= gt < len(cands):
                raise DatasetError(f"{rw}.gt_index: {gt} out of range")
            rounds.append(Round(_field(r, "question", rw), _field(r, "answer", rw), cands, rel, gt))
        dialogues.append(Dialogue(int(_field(d, "image_id", where)), _field(d, "caption", where), rounds))
    ds = Dataset(images, dialogues)
    for i, d in enumerate(dialogues):
        try:
            ds.image(d.image_id)
        except KeyError:
            raise DatasetError(f"dialogues[{i}].image_id: unknown image {d.image_id}") from None
    return ds


def load_dataset(path: str | Path) -> Dataset:
    text = Path(path).read_text(encoding="utf-8")
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise DatasetError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from None
    return dataset_from_json(obj)
