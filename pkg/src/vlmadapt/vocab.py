"""Closed-vocabulary whitespace tokenizer shared by every task."""

from __future__ import annotations

PAD, BOS, EOS, SEP = 0, 1, 2, 3
Q_CUE, A_CUE, O_CUE = 4, 5, 6

_SPECIAL_STRINGS = {PAD: "<pad>", BOS: "<bos>", EOS: "<eos>", SEP: "<sep>"}

COLORS = ["red", "green", "blue", "yellow", "orange", "purple", "pink", "brown"]
OOD_COLORS = ["cyan", "magenta", "lime", "teal", "navy", "maroon", "olive", "silver"]
SHAPES = ["square", "disc", "bar"]
DIGITS = ["0", "1", "2", "3"]
FUNCTION_WORDS = [
    "a", "the", "image", "shows", "objects", "object", ":", "in", "is", "there",
    "what", "color", "shape", "how", "many", "where", "yes", "no",
    "top", "bottom", "left", "right", "are",
]

WORDS = ["Question:", "Answer:", "Output:"] + COLORS + OOD_COLORS + SHAPES + DIGITS + FUNCTION_WORDS

VOCAB_SIZE = 64

_ID_OF = {}
_WORD_OF = {}
for _i, _w in enumerate(WORDS):
    _ID_OF[_w] = 4 + _i
    _WORD_OF[4 + _i] = _w
assert Q_CUE == _ID_OF["Question:"] and A_CUE == _ID_OF["Answer:"] and O_CUE == _ID_OF["Output:"]
assert 4 + len(WORDS) <= VOCAB_SIZE


class OutOfVocabularyError(ValueError):
    pass


def tokenize(text: str) -> list[int]:
    """Whitespace tokenization, bracketed by BOS/EOS. '' -> [BOS, EOS]."""
    ids = [BOS]
    for word in text.split():
        if word not in _ID_OF:
            raise OutOfVocabularyError(f"word {word!r} is not in the vocabulary")
        ids.append(_ID_OF[word])
    ids.append(EOS)
    return ids


def detokenize(tokens: list[int]) -> str:
    """Inverse of tokenize: drops PAD/BOS/EOS/SEP, joins words with spaces."""
    words = []
    for t in tokens:
        t = int(t)
        if t in (PAD, BOS, EOS, SEP):
            continue
        if t not in _WORD_OF:
            raise OutOfVocabularyError(f"token id {t} has no word")
        words.append(_WORD_OF[t])
    return " ".join(words)


def word_id(word: str) -> int:
    return _ID_OF[word]


def token_string(token: int) -> str:
    return _SPECIAL_STRINGS.get(token, _WORD_OF.get(token, f"<unk:{token}>"))
