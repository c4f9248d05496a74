"""The frozen word list shared by captions, the vocabulary and the zeroshot baseline.

Token ids are fixed: 0 is padding, 1 the null marker, content words follow in
the order listed here.
"""

PAD = "<pad>"
NULL = "<null>"

FILLERS = ("a", "scene", "showing", "with", "some", "objects", "near", "the", "image", "and", "of", "in")
COUNTS = ("one", "two", "three", "four", "five", "six")
SHAPES = ("circle", "circles", "triangle", "triangles", "square", "squares")
POSITIONS = ("left", "center", "right")

# Plain-language factor names, used by the zeroshot baseline and for
# repeat-initialisation of factor tokens.
FACTOR_NAMES = {
    "lens": ("normal", "fisheye"),
    "sensor": ("rgb", "thermal", "rgb-thermal", "gated", "event"),
    "viewpoint": ("front", "back", "side", "drone", "pole"),
    "domain": ("real", "simulation", "video-game"),
}

# Appearance words that occur in backbone pretraining captions. Only three
# coincide with a factor name; the rest describe the look rather than naming
# the factor, so the backbone can render every value but does not know most names.
DESCRIPTORS = {
    ("lens", "normal"): "straight",
    ("lens", "fisheye"): "fisheye",
    ("sensor", "rgb"): "colorful",
    ("sensor", "thermal"): "thermal",
    ("sensor", "rgb-thermal"): "tinted",
    ("sensor", "gated"): "monochrome",
    ("sensor", "event"): "outlines",
    ("viewpoint", "front"): "forward",
    ("viewpoint", "back"): "bumper",
    ("viewpoint", "side"): "streaky",
    ("viewpoint", "drone"): "drone",
    ("viewpoint", "pole"): "vignetted",
    ("domain", "real"): "grainy",
    ("domain", "simulation"): "smooth",
    ("domain", "video-game"): "posterized",
}


def _unique(seq):
    out = []
    for w in seq:
        if w not in out:
            out.append(w)
    return tuple(out)


CONTENT_WORDS = _unique(
    FILLERS + COUNTS + SHAPES + POSITIONS
    + tuple(w for names in FACTOR_NAMES.values() for w in names)
    + tuple(DESCRIPTORS.values())
)

SPECIAL = (PAD, NULL)
WORDS = SPECIAL + CONTENT_WORDS
WORD_TO_ID = {w: i for i, w in enumerate(WORDS)}
PAD_ID = WORD_TO_ID[PAD]
NULL_ID = WORD_TO_ID[NULL]


def word_id(word: str) -> int:
    try:
        return WORD_TO_ID[word]
    except KeyError:
        raise KeyError(f"unknown word {word!r}") from None


def ids(words) -> list[int]:
    return [word_id(w) for w in words]


def decode(token_ids) -> list[str]:
    return [WORDS[i] for i in token_ids]
