"""Score codecs between continuous annotation scales and closed label alphabets.

Two alphabets are used throughout the package:

* overall alignment: 15 letters ``a`` (worst) to ``o`` (best), mapped onto the
  continuous [1, 5] annotation scale;
* per-element fidelity: 7 digits ``1`` to ``7``, mapped onto the continuous
  [0, 1] annotation scale.

All rounding in this module is half-away-from-zero (never banker's rounding),
exposed as a single shared function so every caller discretizes identically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

RATING_LETTERS = "abcdefghijklmno"
ELEMENT_DIGITS = "1234567"

N_RATING_LEVELS = len(RATING_LETTERS)  # 15
N_ELEMENT_CATEGORIES = len(ELEMENT_DIGITS)  # 7

DEFAULT_HIT_THRESHOLD = 3


class CodecError(ValueError):
    """Raised for out-of-range scores, unknown labels, or malformed vectors."""


def round_half_away_from_zero(x: float) -> int:
    """Round to the nearest integer, halves away from zero (2.5 -> 3, -2.5 -> -3)."""
    if x >= 0:
        return int(math.floor(x + 0.5))
    return int(math.ceil(x - 0.5))


@dataclass(frozen=True)
class RatingLevel:
    """One of the 15 overall-alignment levels; letter and 1-based index agree."""

    letter: str
    index: int

    def __post_init__(self) -> None:
        if not 1 <= self.index <= N_RATING_LEVELS:
            raise CodecError(f"rating index {self.index} outside [1, {N_RATING_LEVELS}]")
        if self.letter != RATING_LETTERS[self.index - 1]:
            raise CodecError(f"letter {self.letter!r} does not match index {self.index}")

    @classmethod
    def from_index(cls, index: int) -> "RatingLevel":
        if not 1 <= index <= N_RATING_LEVELS:
            raise CodecError(f"rating index {index} outside [1, {N_RATING_LEVELS}]")
        return cls(letter=RATING_LETTERS[index - 1], index=index)

    @classmethod
    def from_letter(cls, letter: str) -> "RatingLevel":
        pos = RATING_LETTERS.find(letter)
        if pos < 0 or len(letter) != 1:
            raise CodecError(f"unknown rating letter {letter!r}")
        return cls(letter=letter, index=pos + 1)


@dataclass(frozen=True)
class ElementCategory:
    """One of the 7 element-fidelity categories (digit 1 = absent, 7 = perfect)."""

    digit: int

    def __post_init__(self) -> None:
        if not 1 <= self.digit <= N_ELEMENT_CATEGORIES:
            raise CodecError(f"element digit {self.digit} outside [1, {N_ELEMENT_CATEGORIES}]")

    @property
    def label(self) -> str:
        return str(self.digit)

    @classmethod
    def from_label(cls, label: str) -> "ElementCategory":
        if label not in ELEMENT_DIGITS:
            raise CodecError(f"unknown element label {label!r}")
        return cls(digit=int(label))


def encode_total_score(score: float) -> RatingLevel:
    """Quantize a continuous total score in [1, 5] onto the 15-letter scale."""
    if not 1.0 <= score <= 5.0:
        raise CodecError(f"total score {score} outside [1, 5]")
    index = round_half_away_from_zero((score - 1.0) / 4.0 * (N_RATING_LEVELS - 1) + 1.0)
    return RatingLevel.from_index(index)


def index_to_score(index: float) -> float:
    """Map a (possibly fractional) 1..15 index back to the [1, 5] scale."""
    return 1.0 + (index - 1.0) * 4.0 / (N_RATING_LEVELS - 1)


def decode_level(level: RatingLevel) -> float:
    """Continuous [1, 5] score at the center of a rating level."""
    return index_to_score(level.index)


def encode_element_score(score: float) -> ElementCategory:
    """Quantize a continuous element score in [0, 1] onto the 7-digit scale."""
    if not 0.0 <= score <= 1.0:
        raise CodecError(f"element score {score} outside [0, 1]")
    return ElementCategory(digit=round_half_away_from_zero(score * (N_ELEMENT_CATEGORIES - 1)) + 1)


def decode_element_category(digit: float) -> float:
    """Map a (possibly fractional) 1..7 category back to the [0, 1] scale."""
    return (digit - 1.0) / (N_ELEMENT_CATEGORIES - 1)


def category_to_hit(category: ElementCategory | int, tau: int = DEFAULT_HIT_THRESHOLD) -> int:
    """Binarize an element category: 1 (hit) iff the digit is strictly above tau."""
    digit = category.digit if isinstance(category, ElementCategory) else int(category)
    if not 1 <= digit <= N_ELEMENT_CATEGORIES:
        raise CodecError(f"element digit {digit} outside [1, {N_ELEMENT_CATEGORIES}]")
    if not 1 <= tau <= N_ELEMENT_CATEGORIES:
        raise CodecError(f"hit threshold {tau} outside [1, {N_ELEMENT_CATEGORIES}]")
    return 1 if digit > tau else 0


def score_to_hit(score: float, tau: int = DEFAULT_HIT_THRESHOLD) -> int:
    """Binarize a continuous element score via its discretized category."""
    return category_to_hit(encode_element_score(score), tau)


@dataclass(frozen=True)
class LogitVector:
    """Raw backend scores for every label of a closed alphabet, in alphabet order."""

    values: tuple[float, ...]
    alphabet: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if len(self.values) != len(self.alphabet):
            raise CodecError(
                f"{len(self.values)} logits for a {len(self.alphabet)}-label alphabet"
            )
        if not all(math.isfinite(v) for v in self.values):
            raise CodecError("logit vector contains a non-finite entry")


@dataclass(frozen=True)
class Distribution:
    """Normalized probabilities over a closed alphabet, in alphabet order."""

    probabilities: tuple[float, ...]
    alphabet: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "probabilities", tuple(float(p) for p in self.probabilities))
        if len(self.probabilities) != len(self.alphabet):
            raise CodecError(
                f"{len(self.probabilities)} probabilities for a "
                f"{len(self.alphabet)}-label alphabet"
            )
        if any(p < 0.0 for p in self.probabilities):
            raise CodecError("negative probability")
        total = math.fsum(self.probabilities)
        if abs(total - 1.0) > 1e-9:
            raise CodecError(f"probabilities sum to {total}, not 1")

    def argmax_label(self) -> str:
        best = max(range(len(self.probabilities)), key=lambda i: self.probabilities[i])
        return self.alphabet[best]


def closed_set_softmax(logits: LogitVector) -> Distribution:
    """Softmax restricted to the closed alphabet, computed with max-subtraction."""
    m = max(logits.values)
    weights = [math.exp(v - m) for v in logits.values]
    total = math.fsum(weights)
    return Distribution(
        probabilities=tuple(w / total for w in weights),
        alphabet=logits.alphabet,
    )


def _expected_index(logits: LogitVector) -> float:
    # Weighted-sum-over-weight-total form: algebraically the softmax expectation,
    # but exact for symmetric inputs (uniform logits give the exact midpoint).
    m = max(logits.values)
    weights = [math.exp(v - m) for v in logits.values]
    num = math.fsum(w * (i + 1) for i, w in enumerate(weights))
    return num / math.fsum(weights)


def expected_total_score(logits: LogitVector) -> float:
    """Probability-weighted expected rating, mapped back to the [1, 5] scale.

    The expectation is taken over the 1..15 level indices under the closed-set
    softmax of the logits, then converted to [1, 5]. Invariant under adding a
    constant to all logits.
    """
    if logits.alphabet != RATING_LETTERS:
        raise CodecError("expected_total_score requires the 15-letter alphabet")
    return index_to_score(_expected_index(logits))


def expected_element_category(logits: LogitVector) -> float:
    """Probability-weighted expected element category in [1, 7]."""
    if logits.alphabet != ELEMENT_DIGITS:
        raise CodecError("expected_element_category requires the 7-digit alphabet")
    return _expected_index(logits)
